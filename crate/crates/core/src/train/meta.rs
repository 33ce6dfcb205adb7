use serde::{Deserialize, Serialize};

use super::config::{EvalConfig, MetaConfig};
use super::eval::{episode_seeds, evaluate};
use crate::data::{sample_episode, DatasetSplits, Phase, Split};
use crate::error::{Error, Result};
use crate::networks::{Graph, Networks, Stages};
use crate::numerics::{sgd_step, OptimizerState, ParamStore};
use crate::tar::Pipeline;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaReport {
    /// Query loss of every episode, in order.
    pub losses: Vec<f64>,
    /// `(episodes completed, val joint accuracy)` at every validation pass.
    pub val_history: Vec<(usize, f64)>,
    /// Episode count of the restored snapshot, or `None` without validation.
    pub best_episode: Option<usize>,
    pub optimizer: OptimizerState,
}

/// Episodic training of the meta-learned parameters selected by `stages`
/// and the model variant. Backbone and base weights are never updated.
///
/// With validation enabled (`val_episodes > 0` and a non-empty novel/val
/// split) the parameters of the best validation pass are restored at the
/// end.
pub fn meta_train(
    net: &Networks,
    params: &mut ParamStore,
    splits: &DatasetSplits,
    stages: Stages,
    config: &MetaConfig,
    seed: u64,
) -> Result<MetaReport> {
    let pipe = Pipeline::new(net, stages)?;
    let trainable = net.meta_trainable(&stages);
    params.set_trainable(&trainable);
    let result = run(&pipe, params, splits, stages, config, seed);
    params.set_trainable(|_| false);
    result
}

fn run(pipe: &Pipeline, params: &mut ParamStore, splits: &DatasetSplits, stages: Stages, config: &MetaConfig, seed: u64) -> Result<MetaReport> {
    let net = pipe.net;
    let mut opt = OptimizerState::new(
        config.learning_rate,
        config.momentum,
        config.weight_decay,
        config.decay_every,
        config.decay_factor,
    )?;
    let spec = config.episode_spec(net.d());
    let validate = config.val_episodes > 0 && !splits.split(Split::NovelVal).is_empty();
    let val_config = EvalConfig {
        episodes: config.val_episodes,
        n_way: config.n_way,
        k_shot: config.k_shot,
        q_per_class: config.q_per_class,
        ..EvalConfig::default()
    };
    let val_seed = seed ^ 0x5eed_0f_7a1;
    let mut losses = Vec::with_capacity(config.episodes);
    let mut val_history = Vec::new();
    let mut best: Option<(f64, usize, ParamStore)> = None;

    for (i, ep_seed) in episode_seeds(seed, config.episodes).into_iter().enumerate() {
        let ep = sample_episode(splits, Phase::MetaTrain, &spec, ep_seed)?;
        let grads = {
            let mut g = Graph::new(params);
            let loss = pipe.episode_loss(&mut g, splits, &ep)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "meta_train loss" });
            }
            losses.push(value);
            g.tape.backward(loss)?
        };
        sgd_step(params, &grads, &mut opt)?;

        let done = i + 1;
        if validate && (done % config.val_every == 0 || done == config.episodes) {
            let acc = evaluate(net, params, splits, stages, Phase::Val, &val_config, val_seed)?
                .joint_accuracy
                .mean;
            val_history.push((done, acc));
            if best.as_ref().map_or(true, |(b, _, _)| acc > *b) {
                best = Some((acc, done, params.clone()));
            }
        }
    }
    let best_episode = best.map(|(_, ep, snapshot)| {
        *params = snapshot;
        ep
    });
    Ok(MetaReport {
        losses,
        val_history,
        best_episode,
        optimizer: opt,
    })
}
