use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Imprint,
    Lwof,
    Tapnet,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricMode {
    EuclideanProjected,
    #[default]
    Cosine,
}

/// Backbone layout. Dense backbones take flat inputs; every block but the
/// last is `linear -> relu` and the last block is linear. Convolutional
/// backbones take `[c, h, w]` inputs; every block is
/// `conv3x3 -> relu -> 2x2 avg-pool (when both extents are even)`, followed
/// by global average pooling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackboneConfig {
    Dense { widths: Vec<usize>, tap_after: usize },
    Conv { channels: Vec<usize>, tap_after: usize },
}

impl BackboneConfig {
    pub fn blocks(&self) -> usize {
        match self {
            BackboneConfig::Dense { widths, .. } => widths.len(),
            BackboneConfig::Conv { channels, .. } => channels.len(),
        }
    }

    pub fn tap_after(&self) -> usize {
        match self {
            BackboneConfig::Dense { tap_after, .. } | BackboneConfig::Conv { tap_after, .. } => *tap_after,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            BackboneConfig::Dense { widths, .. } => *widths.last().unwrap_or(&0),
            BackboneConfig::Conv { channels, .. } => *channels.last().unwrap_or(&0),
        }
    }
}

/// Architecture of every network plus the episode geometry it serves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_shape: Vec<usize>,
    pub backbone: BackboneConfig,
    pub n_base: usize,
    pub n_way: usize,
    pub variant: Variant,
    pub metric: MetricMode,
    /// Initial cosine-head scale.
    #[serde(default = "default_tau")]
    pub init_tau: f64,
}

fn default_tau() -> f64 {
    10.0
}

impl ModelConfig {
    /// Dense desk-scale default: four blocks, tap after the third, D = 64.
    pub fn dense(input_dim: usize, n_base: usize, n_way: usize) -> Self {
        Self {
            input_shape: vec![input_dim],
            backbone: BackboneConfig::Dense {
                widths: vec![64, 64, 64, 64],
                tap_after: 3,
            },
            n_base,
            n_way,
            variant: Variant::Imprint,
            metric: MetricMode::Cosine,
            init_tau: default_tau(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// Checks length coherence of every network against `D`, `N_b` and `N`.
    pub fn validate(&self) -> Result<()> {
        let blocks = self.backbone.blocks();
        let tap = self.backbone.tap_after();
        if blocks < 2 || tap == 0 || tap >= blocks {
            return Err(Error::Invalid(format!(
                "tap must follow a strictly intermediate block (tap_after {tap}, {blocks} blocks)"
            )));
        }
        let d = self.feature_dim();
        if d == 0 || self.n_base == 0 || self.n_way == 0 {
            return Err(Error::Invalid("feature length, base and novel class counts must be positive".into()));
        }
        if self.n_way >= d {
            return Err(Error::Invalid(format!(
                "n_way {} must be below feature length {d}",
                self.n_way
            )));
        }
        match &self.backbone {
            BackboneConfig::Dense { widths, .. } => {
                if self.input_shape.len() != 1 || widths.iter().any(|&w| w == 0) {
                    return Err(Error::Invalid("dense backbone needs flat input and positive widths".into()));
                }
            }
            BackboneConfig::Conv { channels, .. } => {
                if self.input_shape.len() != 3 || channels.iter().any(|&c| c == 0) {
                    return Err(Error::Invalid("conv backbone needs [c, h, w] input and positive channels".into()));
                }
            }
        }
        if !(self.init_tau > 0.0) {
            return Err(Error::Invalid("cosine scale must be positive".into()));
        }
        Ok(())
    }
}

/// Which meta-learned modules are active. Valid sets are the cumulative
/// prefixes of MetaCNN, MergeNet, TconNet.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stages {
    pub metacnn: bool,
    pub mergenet: bool,
    pub tconnet: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self::full()
    }
}

impl Stages {
    pub fn full() -> Self {
        Self {
            metacnn: true,
            mergenet: true,
            tconnet: true,
        }
    }

    pub fn none() -> Self {
        Self {
            metacnn: false,
            mergenet: false,
            tconnet: false,
        }
    }

    /// The first `count` modules in ablation order.
    pub fn prefix(count: usize) -> Result<Self> {
        if count > 3 {
            return Err(Error::Invalid(format!("stage prefix {count} > 3")));
        }
        Ok(Self {
            metacnn: count >= 1,
            mergenet: count >= 2,
            tconnet: count >= 3,
        })
    }

    pub fn count(&self) -> usize {
        self.metacnn as usize + self.mergenet as usize + self.tconnet as usize
    }

    pub fn validate(&self) -> Result<()> {
        if *self == Self::prefix(self.count())? {
            Ok(())
        } else {
            Err(Error::Invalid(
                "stage set must be a prefix of [metacnn, mergenet, tconnet]".into(),
            ))
        }
    }

    pub fn label(&self) -> &'static str {
        match self.count() {
            0 => "baseline",
            1 => "+metacnn",
            2 => "+mergenet",
            _ => "+tconnet",
        }
    }
}

impl std::str::FromStr for Stages {
    type Err = Error;

    /// Comma-separated module names, e.g. `metacnn,mergenet`; `none` for the
    /// empty set.
    fn from_str(s: &str) -> Result<Self> {
        let mut st = Stages::none();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty() && *p != "none") {
            match part {
                "metacnn" => st.metacnn = true,
                "mergenet" => st.mergenet = true,
                "tconnet" => st.tconnet = true,
                other => return Err(Error::Invalid(format!("unknown stage {other}"))),
            }
        }
        st.validate()?;
        Ok(st)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_prefixes() {
        assert_eq!("metacnn,mergenet".parse::<Stages>().unwrap(), Stages::prefix(2).unwrap());
        assert_eq!("none".parse::<Stages>().unwrap(), Stages::none());
        assert!("mergenet".parse::<Stages>().is_err());
        assert!("metacnn,tconnet".parse::<Stages>().is_err());
    }

    #[test]
    fn stage_flags_round_trip_through_json() {
        for n in 0..=3 {
            let s = Stages::prefix(n).unwrap();
            let back: Stages = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
            assert_eq!(back, s);
        }
    }

    #[test]
    fn tap_must_be_intermediate() {
        let mut c = ModelConfig::dense(32, 10, 5);
        c.validate().unwrap();
        c.backbone = BackboneConfig::Dense {
            widths: vec![64, 64],
            tap_after: 2,
        };
        assert!(c.validate().is_err());
        let mut c = ModelConfig::dense(32, 10, 64);
        assert!(c.validate().is_err());
        c.n_way = 5;
        c.validate().unwrap();
    }
}
