use std::io::Write;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::EvalConfig;
use crate::data::{sample_episode, DatasetSplits, Episode, Phase};
use crate::error::{Error, Result};
use crate::networks::{Networks, Stages};
use crate::numerics::{argmax, ParamStore, RealArray};
use crate::tar::Pipeline;

/// Accuracies of one evaluation episode, in percent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub episode_id: usize,
    pub seed: u64,
    pub joint: f64,
    pub base_ind: f64,
    pub novel_ind: f64,
    pub delta_a: f64,
    pub delta_b: f64,
}

/// Mean and confidence half-width over episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn of(values: &[f64], z: f64) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Self { mean: 0.0, ci95: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Self {
            mean,
            ci95: z * var.sqrt() / n.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub joint_accuracy: Stat,
    pub base_individual: Stat,
    pub novel_individual: Stat,
    pub delta_a: f64,
    pub delta_b: f64,
    pub delta: f64,
    pub episodes: Vec<EpisodeRecord>,
}

impl MetricsReport {
    pub fn from_records(episodes: Vec<EpisodeRecord>, z: f64) -> Self {
        let col = |f: fn(&EpisodeRecord) -> f64| episodes.iter().map(f).collect::<Vec<f64>>();
        let delta_a = Stat::of(&col(|r| r.delta_a), z).mean;
        let delta_b = Stat::of(&col(|r| r.delta_b), z).mean;
        Self {
            joint_accuracy: Stat::of(&col(|r| r.joint), z),
            base_individual: Stat::of(&col(|r| r.base_ind), z),
            novel_individual: Stat::of(&col(|r| r.novel_ind), z),
            delta_a,
            delta_b,
            delta: 0.5 * (delta_a + delta_b),
            episodes,
        }
    }

    /// Report without the per-episode records.
    pub fn summary(&self) -> Self {
        Self {
            episodes: Vec::new(),
            ..self.clone()
        }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut out = String::from("episode_id,seed,joint,base_ind,novel_ind,delta_a,delta_b\n");
        for r in &self.episodes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.episode_id, r.seed, r.joint, r.base_ind, r.novel_ind, r.delta_a, r.delta_b
            ));
        }
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(out.as_bytes()))
            .map_err(|e| Error::io(path, e))
    }
}

/// Per-episode seeds derived from one seed. Every evaluation with the same
/// seed sees the same episodes.
pub fn episode_seeds(seed: u64, count: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| rng.next_u64()).collect()
}

/// Worker pool sized by `XTAR_THREADS` (rayon's default when unset).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("XTAR_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Invalid(format!("XTAR_THREADS must be a positive integer, got {v:?}")))?;
        if n == 0 {
            return Err(Error::Invalid("XTAR_THREADS must be positive".into()));
        }
        b = b.num_threads(n);
    }
    b.build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))
}

fn percent(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * hits as f64 / total as f64
    }
}

/// Accuracies of one episode given each query's class posteriors over all
/// `n_base + n_way` classes (base queries first).
pub fn score_episode(ep: &Episode, posteriors: &[Vec<f64>]) -> (f64, f64, f64, f64, f64) {
    let nb = ep.n_base;
    let nq_base = ep.query_base.len();
    let (mut joint_base, mut joint_novel, mut ind_base, mut ind_novel) = (0, 0, 0, 0);
    for (i, (q, p)) in ep.queries().zip(posteriors).enumerate() {
        let truth = q.label - 1;
        let joint_hit = argmax(p) == truth;
        if i < nq_base {
            joint_base += joint_hit as usize;
            ind_base += (argmax(&p[..nb]) == truth) as usize;
        } else {
            joint_novel += joint_hit as usize;
            ind_novel += (nb + argmax(&p[nb..]) == truth) as usize;
        }
    }
    let nq_novel = ep.query_novel.len();
    let joint = percent(joint_base + joint_novel, nq_base + nq_novel);
    let base_ind = percent(ind_base, nq_base);
    let novel_ind = percent(ind_novel, nq_novel);
    let delta_a = percent(joint_base, nq_base) - base_ind;
    let delta_b = percent(joint_novel, nq_novel) - novel_ind;
    (joint, base_ind, novel_ind, delta_a, delta_b)
}

/// Runs one evaluation episode and returns the query posteriors.
pub fn episode_posteriors(pipe: &Pipeline, params: &ParamStore, splits: &DatasetSplits, ep: &Episode) -> Result<Vec<Vec<f64>>> {
    let state = pipe.process_support(params, splits, ep)?;
    let inputs: Vec<&RealArray> = ep.queries().map(|q| &splits.sample(q.split, q.index).input).collect();
    pipe.classify(params, &state, &inputs)
}

/// Joint and individual accuracies over `config.episodes` episodes of
/// `phase`, evaluated in parallel. The result does not depend on the
/// thread count.
pub fn evaluate(
    net: &Networks,
    params: &ParamStore,
    splits: &DatasetSplits,
    stages: Stages,
    phase: Phase,
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricsReport> {
    let pipe = Pipeline::new(net, stages)?;
    let spec = config.episode_spec(net.d());
    let seeds = episode_seeds(seed, config.episodes);
    let pool = thread_pool()?;
    let records: Vec<EpisodeRecord> = pool.install(|| {
        seeds
            .par_iter()
            .enumerate()
            .map(|(id, &s)| {
                let ep = sample_episode(splits, phase, &spec, s)?;
                let post = episode_posteriors(&pipe, params, splits, &ep)?;
                let (joint, base_ind, novel_ind, delta_a, delta_b) = score_episode(&ep, &post);
                Ok(EpisodeRecord {
                    episode_id: id,
                    seed: s,
                    joint,
                    base_ind,
                    novel_ind,
                    delta_a,
                    delta_b,
                })
            })
            .collect::<Result<Vec<_>>>()
    })?;
    Ok(MetricsReport::from_records(records, config.z_score))
}
