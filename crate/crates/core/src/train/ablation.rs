use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::eval::{evaluate, MetricsReport};
use super::meta::{meta_train, MetaReport};
use crate::data::{DatasetSplits, Phase};
use crate::error::Result;
use crate::networks::{Networks, Stages};
use crate::numerics::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageResult {
    pub stages: Stages,
    pub label: String,
    pub report: MetricsReport,
    #[serde(skip)]
    pub meta: Option<MetaReport>,
    #[serde(skip)]
    pub params: ParamStore,
}

/// Meta-trains and evaluates every stage set from the same pretrained
/// parameters, meta-training seed and evaluation episodes, so stages differ
/// only in the modules they enable. A stage set with nothing to train is
/// evaluated as is.
pub fn run_ablation(
    net: &Networks,
    pretrained: &ParamStore,
    splits: &DatasetSplits,
    stage_sets: &[Stages],
    config: &TrainConfig,
    episode_seed: u64,
) -> Result<Vec<StageResult>> {
    let mut out = Vec::with_capacity(stage_sets.len());
    for &stages in stage_sets {
        stages.validate()?;
        let mut params = pretrained.clone();
        let trainable = net.meta_trainable(&stages);
        let has_trainable = params.names().any(|n| trainable(n));
        let meta = if has_trainable && config.meta.episodes > 0 {
            Some(meta_train(net, &mut params, splits, stages, &config.meta, episode_seed)?)
        } else {
            None
        };
        let report = evaluate(net, &params, splits, stages, Phase::Test, &config.eval, episode_seed.wrapping_add(1))?;
        out.push(StageResult {
            stages,
            label: stages.label().to_string(),
            report,
            meta,
            params,
        });
    }
    Ok(out)
}
