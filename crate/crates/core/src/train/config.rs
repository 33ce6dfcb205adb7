use serde::{Deserialize, Serialize};

use crate::data::{BaseQueries, EpisodeSpec};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps between learning-rate drops.
    pub decay_every: u64,
    pub decay_factor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 2e-3,
            decay_every: 600,
            decay_factor: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// l2 ratio on the meta-learned parameters.
    pub weight_decay: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
    /// Episodes between validation passes for best-snapshot selection.
    pub val_every: usize,
    pub val_episodes: usize,
    /// Draw novel classes from base/train and mask their base columns.
    pub fake_novel: bool,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            n_way: 5,
            k_shot: 5,
            q_per_class: 5,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 7e-4,
            decay_every: 4000,
            decay_factor: 0.1,
            val_every: 250,
            val_episodes: 100,
            fake_novel: false,
        }
    }
}

impl MetaConfig {
    pub fn episode_spec(&self, feature_dim: usize) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.q_per_class,
            fake_novel: self.fake_novel,
            base_queries: BaseQueries::Uniform,
            feature_dim: Some(feature_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Novel queries per class; base queries match the novel total.
    pub q_per_class: usize,
    /// Two-sided normal quantile for the confidence interval.
    pub z_score: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            n_way: 5,
            k_shot: 5,
            q_per_class: 5,
            z_score: 1.96,
        }
    }
}

impl EvalConfig {
    pub fn episode_spec(&self, feature_dim: usize) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.q_per_class,
            fake_novel: false,
            base_queries: BaseQueries::Uniform,
            feature_dim: Some(feature_dim),
        }
    }
}

/// Hyperparameters of all three phases.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub pretrain: PretrainConfig,
    pub meta: MetaConfig,
    pub eval: EvalConfig,
}

impl TrainConfig {
    pub fn validate(&self, feature_dim: usize) -> Result<()> {
        let p = &self.pretrain;
        let m = &self.meta;
        let e = &self.eval;
        let counts = [
            ("pretrain.epochs", p.epochs),
            ("pretrain.batch_size", p.batch_size),
            ("meta.n_way", m.n_way),
            ("meta.k_shot", m.k_shot),
            ("meta.q_per_class", m.q_per_class),
            ("meta.val_every", m.val_every),
            ("eval.episodes", e.episodes),
            ("eval.n_way", e.n_way),
            ("eval.k_shot", e.k_shot),
            ("eval.q_per_class", e.q_per_class),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if m.n_way >= feature_dim || e.n_way >= feature_dim {
            return Err(Error::Invalid(format!("n_way must be below feature length {feature_dim}")));
        }
        if m.n_way != e.n_way {
            return Err(Error::Invalid("meta.n_way and eval.n_way must match the model".into()));
        }
        if !(e.z_score > 0.0) {
            return Err(Error::Invalid("eval.z_score must be positive".into()));
        }
        Ok(())
    }
}
