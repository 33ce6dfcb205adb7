//! Pretraining, episodic meta-training and test-phase evaluation.

mod ablation;
mod config;
mod eval;
mod meta;
mod pretrain;

pub use ablation::{run_ablation, StageResult};
pub use config::{EvalConfig, MetaConfig, PretrainConfig, TrainConfig};
pub use eval::{episode_posteriors, episode_seeds, evaluate, score_episode, thread_pool, EpisodeRecord, MetricsReport, Stat};
pub use meta::{meta_train, MetaReport};
pub use pretrain::{base_accuracy, base_head, base_predictions, pretrain, PretrainReport};
