use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PretrainConfig;
use crate::data::{DatasetSplits, Split};
use crate::error::{Error, Result};
use crate::networks::{Graph, MetricMode, Networks};
use crate::numerics::{argmax, norm, sgd_step, OptimizerState, ParamStore, RealArray, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub steps: usize,
    /// Minibatch loss of every step.
    pub losses: Vec<f64>,
    /// Base/val accuracy in percent; `None` when base/val is empty.
    pub val_accuracy: Option<f64>,
}

fn is_pretrained(name: &str, metric: MetricMode) -> bool {
    name.starts_with("backbone.")
        || name == "classifier.base"
        || (metric == MetricMode::Cosine && name == "classifier.tau")
}

/// Base-class scores of feature rows `f`: `tau * cos` or negative squared
/// distance to each base weight.
pub fn base_head(net: &Networks, g: &mut Graph, f: Var) -> Result<Var> {
    let w = g.param("classifier.base")?;
    match net.config.metric {
        MetricMode::Cosine => {
            let fnorm = g.tape.row_normalize(f)?;
            let wn = g.tape.row_normalize(w)?;
            let wt = g.tape.transpose(wn)?;
            let cos = g.tape.matmul(fnorm, wt)?;
            let tau = g.param("classifier.tau")?;
            g.tape.scale_by(cos, tau)
        }
        MetricMode::EuclideanProjected => {
            let d = g.tape.sq_dist(f, w)?;
            g.tape.scale(d, -1.0)
        }
    }
}

/// Predicted base labels (0-based) for `inputs`, in batches.
pub fn base_predictions(net: &Networks, params: &ParamStore, inputs: &[&RealArray]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(256) {
        let mut g = Graph::new(params);
        let x = g.constant(net.batch(chunk)?)?;
        let (_, f) = net.backbone(&mut g, x)?;
        let s = base_head(net, &mut g, f)?;
        let s = g.value(s);
        out.extend((0..s.rows()).map(|i| argmax(s.row_slice(i))));
    }
    Ok(out)
}

/// Percent of `split` samples whose predicted base label is correct.
pub fn base_accuracy(net: &Networks, params: &ParamStore, splits: &DatasetSplits, split: Split) -> Result<Option<f64>> {
    let data = splits.split(split);
    if data.is_empty() {
        return Ok(None);
    }
    let inputs: Vec<&RealArray> = data.samples.iter().map(|s| &s.input).collect();
    let pred = base_predictions(net, params, &inputs)?;
    let correct = data
        .samples
        .iter()
        .zip(&pred)
        .filter(|(s, &p)| splits.base_label(s.label) == Some(p + 1))
        .count();
    Ok(Some(100.0 * correct as f64 / data.len() as f64))
}

/// Supervised training of the backbone and base weights on base/train.
/// In cosine mode each base weight row is finally rescaled to the mean
/// feature norm of its class, which leaves cosine scores unchanged.
pub fn pretrain(net: &Networks, params: &mut ParamStore, splits: &DatasetSplits, config: &PretrainConfig, seed: u64) -> Result<PretrainReport> {
    let train = splits.split(Split::BaseTrain);
    if train.is_empty() {
        return Err(Error::Insufficient("base/train is empty".into()));
    }
    if splits.n_base() != net.config.n_base {
        return Err(Error::Invalid(format!(
            "dataset has {} base classes, model expects {}",
            splits.n_base(),
            net.config.n_base
        )));
    }
    let metric = net.config.metric;
    params.set_trainable(|n| is_pretrained(n, metric));
    let mut opt = OptimizerState::new(
        config.learning_rate,
        config.momentum,
        config.weight_decay,
        config.decay_every,
        config.decay_factor,
    )?;
    let labels: Vec<usize> = train
        .samples
        .iter()
        .map(|s| {
            splits
                .base_label(s.label)
                .map(|l| l - 1)
                .ok_or_else(|| Error::Invalid(format!("class {} in base/train is not a base class", s.label)))
        })
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut losses = Vec::new();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let inputs: Vec<&RealArray> = batch.iter().map(|&i| &train.samples[i].input).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let grads = {
                let mut g = Graph::new(params);
                let x = g.constant(net.batch(&inputs)?)?;
                let (_, f) = net.backbone(&mut g, x)?;
                let s = base_head(net, &mut g, f)?;
                let loss = g.tape.cross_entropy(s, &targets)?;
                losses.push(g.value(loss).item());
                g.tape.backward(loss)?
            };
            sgd_step(params, &grads, &mut opt)?;
        }
    }
    params.set_trainable(|_| false);
    if metric == MetricMode::Cosine {
        rescale_base_rows(net, params, splits, &labels)?;
    }
    let val_accuracy = base_accuracy(net, params, splits, Split::BaseVal)?;
    Ok(PretrainReport {
        steps: losses.len(),
        losses,
        val_accuracy,
    })
}

fn rescale_base_rows(net: &Networks, params: &mut ParamStore, splits: &DatasetSplits, labels: &[usize]) -> Result<()> {
    let nb = net.config.n_base;
    let train = splits.split(Split::BaseTrain);
    let mut sum = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    for (chunk_idx, chunk) in train.samples.chunks(256).enumerate() {
        let inputs: Vec<&RealArray> = chunk.iter().map(|s| &s.input).collect();
        let mut g = Graph::new(params);
        let x = g.constant(net.batch(&inputs)?)?;
        let (_, f) = net.backbone(&mut g, x)?;
        let f = g.value(f);
        for i in 0..f.rows() {
            let l = labels[chunk_idx * 256 + i];
            sum[l] += norm(f.row_slice(i));
            count[l] += 1;
        }
    }
    let base = params.get_mut("classifier.base")?;
    let d = base.cols();
    for i in 0..nb {
        if count[i] == 0 {
            continue;
        }
        let target = sum[i] / count[i] as f64;
        let row = &mut base.data_mut()[i * d..(i + 1) * d];
        let n = norm(row);
        if n > 1e-12 {
            row.iter_mut().for_each(|x| *x *= target / n);
        }
    }
    Ok(())
}
