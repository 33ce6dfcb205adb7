//! Dataset splits, tensor files, synthetic data and episodic sampling.

pub mod episode;
pub mod splits;
pub mod synth;
pub mod tensor_file;

pub use episode::{sample_episode, BaseQueries, Episode, EpisodeSpec, Phase, SampleRef};
pub use splits::{load_dataset, save_dataset, DatasetSplits, LabeledSample, Split, SplitData};
pub use synth::{generate_synthetic, SynthConfig};
pub use tensor_file::{read_tensor, write_tensor, Dtype};
