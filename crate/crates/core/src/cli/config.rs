use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::AnalysisConfig;
use crate::data::{generate_synthetic, load_dataset, DatasetSplits, SynthConfig};
use crate::error::{Error, Result};
use crate::networks::{BackboneConfig, MetricMode, ModelConfig, Stages, Variant};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    /// Generated in memory from `seeds.data`.
    Synthetic(SynthConfig),
    /// JSON manifest of tensor files.
    Manifest(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Synthetic data generation.
    pub data: u64,
    /// Parameter initialization and pretraining minibatch order.
    pub init: u64,
    /// Meta-training episodes; evaluation uses `episode + 1`, analysis
    /// `episode + 2`.
    pub episode: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            data: 0,
            init: 1,
            episode: 2,
        }
    }
}

/// Everything one run needs. Every field has a default, so `{}` is a valid
/// config for the desk-scale synthetic benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    pub backbone: BackboneConfig,
    pub variant: Variant,
    pub metric: MetricMode,
    pub init_tau: f64,
    /// Modules enabled by meta-train, eval, analyze and export-features.
    pub stages: Stages,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub seeds: Seeds,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetSource::Synthetic(SynthConfig::benchmark()),
            backbone: BackboneConfig::Dense {
                widths: vec![64, 64, 64, 64],
                tap_after: 3,
            },
            variant: Variant::Imprint,
            metric: MetricMode::Cosine,
            init_tau: 10.0,
            stages: Stages::full(),
            train: TrainConfig::default(),
            analysis: AnalysisConfig {
                queries_per_class: 15,
                ..AnalysisConfig::default()
            },
            seeds: Seeds::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Canonical JSON with every default filled in.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON with the output directory cleared, so
    /// runs that differ only in where they write share a hash.
    pub fn hash(&self) -> Result<[u8; 32]> {
        let experiment = Self {
            output_dir: PathBuf::new(),
            ..self.clone()
        };
        Ok(Sha256::digest(experiment.to_json()?.as_bytes()).into())
    }

    pub fn load_dataset(&self) -> Result<DatasetSplits> {
        match &self.dataset {
            DatasetSource::Synthetic(s) => generate_synthetic(s, &mut ChaCha8Rng::seed_from_u64(self.seeds.data)),
            DatasetSource::Manifest(p) => load_dataset(p),
        }
    }

    /// Model architecture for a dataset with `input_shape` and `n_base`
    /// base classes.
    pub fn model(&self, input_shape: &[usize], n_base: usize) -> ModelConfig {
        ModelConfig {
            input_shape: input_shape.to_vec(),
            backbone: self.backbone.clone(),
            n_base,
            n_way: self.train.meta.n_way,
            variant: self.variant,
            metric: self.metric,
            init_tau: self.init_tau,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stages.validate()?;
        self.train.validate(self.backbone.feature_dim())?;
        if self.analysis.n_way != self.train.meta.n_way {
            return Err(Error::Invalid("analysis.n_way must match train.meta.n_way".into()));
        }
        if self.analysis.episodes == 0 || self.analysis.queries_per_class == 0 || self.analysis.k_shot == 0 {
            return Err(Error::Invalid("analysis counts must be positive".into()));
        }
        Ok(())
    }
}
