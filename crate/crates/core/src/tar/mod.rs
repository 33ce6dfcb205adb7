//! Per-episode computation: support processing into a [`TaskState`] and
//! query classification against all base and novel classes.
//!
//! Everything is expressed once on a [`Graph`]; meta-training
//! differentiates through it and evaluation reads values off it.

use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplits, Episode, SampleRef};
use crate::error::{Error, Result};
use crate::networks::{Graph, MetricMode, Networks, Stages, Variant};
use crate::numerics::{null_space, softmax, ParamStore, RealArray, Var};

#[cfg(test)]
mod tests;

/// Everything support processing produces for one episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskState {
    /// Mean concatenated `[f, g]` support vector, `[1, 2D]`.
    pub c: RealArray,
    pub omega_pre: RealArray,
    pub omega_meta: RealArray,
    /// `[N, D]`, row `k` for episode class `n_base + 1 + k`.
    pub prototypes: RealArray,
    pub c_star: RealArray,
    /// Conditioned classifier: active base rows, then novel rows.
    pub w_star: RealArray,
    /// Projection `[D, D - N]` in Euclidean mode.
    pub m: Option<RealArray>,
    pub metric_mode: MetricMode,
    /// 0-based base rows present in `w_star`.
    pub active_base: Vec<usize>,
    pub n_base: usize,
    pub n_way: usize,
}

impl TaskState {
    /// Column of episode label `label` (1-based) in `w_star`, or `None` for
    /// a masked base class.
    pub fn column(&self, label: usize) -> Option<usize> {
        if label == 0 || label > self.n_base + self.n_way {
            None
        } else if label <= self.n_base {
            self.active_base.binary_search(&(label - 1)).ok()
        } else {
            Some(self.active_base.len() + label - self.n_base - 1)
        }
    }

    /// Scatters per-column values onto all `n_base + n_way` episode classes,
    /// leaving masked classes at zero.
    pub fn expand(&self, per_column: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n_base + self.n_way];
        for (col, &b) in self.active_base.iter().enumerate() {
            out[b] = per_column[col];
        }
        let a = self.active_base.len();
        out[self.n_base..].copy_from_slice(&per_column[a..a + self.n_way]);
        out
    }
}

/// Graph handles for one processed support set.
#[derive(Clone, Debug)]
pub struct TaskVars {
    pub c: Var,
    pub omega_pre: Var,
    pub omega_meta: Var,
    pub prototypes: Var,
    pub c_star: Var,
    pub w_star: Var,
    pub m: Option<Var>,
    pub active_base: Vec<usize>,
}

/// `omega_pre * f + omega_meta * g`, row-wise.
pub fn combined_on(g: &mut Graph, f: Var, gf: Var, omega_pre: Var, omega_meta: Var) -> Result<Var> {
    let a = g.tape.mul_row(f, omega_pre)?;
    let b = g.tape.mul_row(gf, omega_meta)?;
    g.tape.add(a, b)
}

/// Averaging matrix `[n, rows]` that maps rows labelled `0..n` to their
/// class means.
pub fn averaging_matrix(labels: &[usize], n: usize) -> Result<RealArray> {
    let mut counts = vec![0usize; n];
    for &l in labels {
        if l >= n {
            return Err(Error::Invalid(format!("class index {l} outside 0..{n}")));
        }
        counts[l] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(Error::Insufficient(format!("empty support group for novel class {k}")));
    }
    let mut a = RealArray::zeros(&[n, labels.len()]);
    for (j, &l) in labels.iter().enumerate() {
        a.data_mut()[l * labels.len() + j] = 1.0 / counts[l] as f64;
    }
    Ok(a)
}

/// `(1 + gamma) * w + beta` for every row of `w`.
pub fn condition_on(g: &mut Graph, w: Var, gamma: Var, beta: Var) -> Result<Var> {
    let scale = g.tape.add_scalar(gamma, 1.0)?;
    let scaled = g.tape.mul_row(w, scale)?;
    g.tape.add_row(scaled, beta)
}

/// `w_init - softmax(lambda) @ w_base`, one row per novel class.
pub fn adapt_on(g: &mut Graph, w_init: Var, lambda: Var, w_base: Var) -> Result<Var> {
    let att = g.tape.softmax_rows(lambda)?;
    let bias = g.tape.matmul(att, w_base)?;
    g.tape.sub(w_init, bias)
}

/// Null space of the unit-normalized errors `w/|w| - c/|c|`.
pub fn alignment_projection(adapted_novel: &RealArray, prototypes: &RealArray) -> Result<RealArray> {
    if adapted_novel.shape() != prototypes.shape() || adapted_novel.shape().len() != 2 {
        return Err(Error::shape("alignment_projection", "weights and prototypes must both be [N, D]"));
    }
    let (n, d) = (prototypes.rows(), prototypes.cols());
    if d <= n {
        return Err(Error::Invalid(format!("projection needs D > N (D = {d}, N = {n})")));
    }
    let mut eps = Vec::with_capacity(n * d);
    for k in 0..n {
        let w = adapted_novel.row_slice(k);
        let c = prototypes.row_slice(k);
        let (nw, nc) = (crate::numerics::norm(w), crate::numerics::norm(c));
        if nw < 1e-12 || nc < 1e-12 {
            return Err(Error::ZeroNorm("alignment_projection"));
        }
        eps.extend(w.iter().zip(c).map(|(a, b)| a / nw - b / nc));
    }
    null_space(&RealArray::new(vec![n, d], eps)?)
}

/// Class scores of rows `z` against classifier rows `w`: negative squared
/// distance after projection, or `tau` times cosine similarity.
pub fn scores_on(g: &mut Graph, z: Var, w: Var, m: Option<Var>, tau: Option<Var>) -> Result<Var> {
    match (m, tau) {
        (Some(m), _) => {
            let zm = g.tape.matmul(z, m)?;
            let wm = g.tape.matmul(w, m)?;
            let d = g.tape.sq_dist(zm, wm)?;
            g.tape.scale(d, -1.0)
        }
        (None, Some(tau)) => {
            let zn = g.tape.row_normalize(z)?;
            let wn = g.tape.row_normalize(w)?;
            let wt = g.tape.transpose(wn)?;
            let cos = g.tape.matmul(zn, wt)?;
            g.tape.scale_by(cos, tau)
        }
        (None, None) => Err(Error::Invalid("classification needs a projection or a cosine scale".into())),
    }
}

/// One episode laid out on a graph: task variables, query logits over the
/// `w_star` columns and the target column of each query.
pub struct EpisodeGraph {
    pub task: TaskVars,
    pub logits: Var,
    pub targets: Vec<usize>,
}

/// The TAR pipeline for a fixed architecture and set of enabled modules.
#[derive(Clone, Copy, Debug)]
pub struct Pipeline<'a> {
    pub net: &'a Networks,
    pub stages: Stages,
    /// Use this projection instead of recomputing it from the support set.
    pub fixed_projection: Option<&'a RealArray>,
}

impl<'a> Pipeline<'a> {
    pub fn new(net: &'a Networks, stages: Stages) -> Result<Self> {
        stages.validate()?;
        Ok(Self {
            net,
            stages,
            fixed_projection: None,
        })
    }

    /// `(f, g)` feature rows for a batch of inputs. With MetaCNN disabled
    /// `g` is zero.
    pub fn features(&self, g: &mut Graph, inputs: &[&RealArray]) -> Result<(Var, Var)> {
        let x = g.constant(self.net.batch(inputs)?)?;
        let (tap, f) = self.net.backbone(g, x)?;
        let gf = if self.stages.metacnn {
            self.net.metacnn(g, tap)?
        } else {
            g.constant(RealArray::zeros(&[inputs.len(), self.net.d()]))?
        };
        Ok((f, gf))
    }

    /// Support processing from feature rows `f_s`, `g_s` with novel class
    /// indices `labels` (`0..N`).
    pub fn support(&self, g: &mut Graph, f_s: Var, g_s: Var, labels: &[usize], active_base: &[usize]) -> Result<TaskVars> {
        let cfg = &self.net.config;
        let (n, d, nb) = (cfg.n_way, self.net.d(), cfg.n_base);
        if active_base.is_empty() || active_base.iter().any(|&b| b >= nb) || !active_base.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Invalid("active base classes must be ascending indices below N_b".into()));
        }
        let fg = g.tape.concat_cols(f_s, g_s)?;
        let c = g.tape.mean_rows(fg)?;
        let (omega_pre, omega_meta) = if self.stages.mergenet {
            self.net.mergenet(g, c)?
        } else {
            let ones = g.constant(RealArray::ones(&[1, d]))?;
            (ones, ones)
        };
        let z = combined_on(g, f_s, g_s, omega_pre, omega_meta)?;
        let avg = g.constant(averaging_matrix(labels, n)?)?;
        let prototypes = g.tape.matmul(avg, z)?;
        let c_star = g.tape.mean_rows(prototypes)?;

        let masked = active_base.len() != nb;
        let mut base = g.param("classifier.base")?;
        if masked {
            base = g.tape.select_rows(base, active_base)?;
        }
        let w_base = if self.stages.tconnet {
            let (gamma, beta) = self.net.tconnet_gamma_beta(g, c_star)?;
            condition_on(g, base, gamma, beta)?
        } else {
            base
        };
        let w_init = match cfg.variant {
            Variant::Imprint => prototypes,
            Variant::Tapnet => g.param("tapnet.phi")?,
            Variant::Lwof => self.net.lwof_generate(g, prototypes, base, active_base)?,
        };
        let w_novel = if self.stages.tconnet {
            let wt = g.tape.transpose(w_base)?;
            let mut sigma = g.tape.matmul(prototypes, wt)?;
            let select = masked.then(|| selection_matrix(active_base, nb));
            if let Some(s) = &select {
                let s = g.constant(s.clone())?;
                sigma = g.tape.matmul(sigma, s)?;
            }
            let mut lambda = self.net.tconnet_lambda(g, sigma)?;
            if let Some(s) = select {
                let st = g.constant(s.transpose())?;
                lambda = g.tape.matmul(lambda, st)?;
            }
            adapt_on(g, w_init, lambda, w_base)?
        } else {
            w_init
        };
        let w_star = g.tape.concat_rows(&[w_base, w_novel])?;
        let m = match cfg.metric {
            MetricMode::Cosine => None,
            MetricMode::EuclideanProjected => {
                let m = match self.fixed_projection {
                    Some(m) => m.clone(),
                    None => alignment_projection(g.value(w_novel), g.value(prototypes))?,
                };
                Some(g.constant(m)?)
            }
        };
        Ok(TaskVars {
            c,
            omega_pre,
            omega_meta,
            prototypes,
            c_star,
            w_star,
            m,
            active_base: active_base.to_vec(),
        })
    }

    /// Query scores over the `w_star` columns.
    pub fn query_logits(&self, g: &mut Graph, task: &TaskVars, f_q: Var, g_q: Var) -> Result<Var> {
        let z = combined_on(g, f_q, g_q, task.omega_pre, task.omega_meta)?;
        let tau = match task.m {
            Some(_) => None,
            None => Some(g.param("classifier.tau")?),
        };
        scores_on(g, z, task.w_star, task.m, tau)
    }

    /// The whole episode on one graph; support and queries share a single
    /// backbone batch.
    pub fn episode(&self, g: &mut Graph, splits: &DatasetSplits, ep: &Episode) -> Result<EpisodeGraph> {
        let cfg = &self.net.config;
        if ep.n_base != cfg.n_base || ep.n_way != cfg.n_way {
            return Err(Error::Invalid(format!(
                "episode has {} base / {} novel classes, model expects {} / {}",
                ep.n_base, ep.n_way, cfg.n_base, cfg.n_way
            )));
        }
        let refs: Vec<&SampleRef> = ep.support.iter().chain(ep.queries()).collect();
        let inputs: Vec<&RealArray> = refs.iter().map(|r| &splits.sample(r.split, r.index).input).collect();
        let (f, gf) = self.features(g, &inputs)?;
        let ns = ep.support.len();
        let support_rows: Vec<usize> = (0..ns).collect();
        let query_rows: Vec<usize> = (ns..refs.len()).collect();
        let f_s = g.tape.select_rows(f, &support_rows)?;
        let g_s = g.tape.select_rows(gf, &support_rows)?;
        let f_q = g.tape.select_rows(f, &query_rows)?;
        let g_q = g.tape.select_rows(gf, &query_rows)?;
        let labels = novel_indices(ep)?;
        let active: Vec<usize> = ep.active_base().iter().map(|l| l - 1).collect();
        let task = self.support(g, f_s, g_s, &labels, &active)?;
        let logits = self.query_logits(g, &task, f_q, g_q)?;
        let n_active = active.len();
        let targets = ep
            .queries()
            .map(|q| column_of(q.label, ep.n_base, &active, n_active))
            .collect::<Result<Vec<_>>>()?;
        Ok(EpisodeGraph { task, logits, targets })
    }

    /// Mean query cross-entropy of an episode, ready for `backward`.
    pub fn episode_loss(&self, g: &mut Graph, splits: &DatasetSplits, ep: &Episode) -> Result<Var> {
        let eg = self.episode(g, splits, ep)?;
        g.tape.cross_entropy(eg.logits, &eg.targets)
    }

    /// Processes the support set of `ep` into a plain-value task state.
    pub fn process_support(&self, params: &ParamStore, splits: &DatasetSplits, ep: &Episode) -> Result<TaskState> {
        let mut g = Graph::new(params);
        let inputs: Vec<&RealArray> = ep.support.iter().map(|r| &splits.sample(r.split, r.index).input).collect();
        let (f_s, g_s) = self.features(&mut g, &inputs)?;
        let labels = novel_indices(ep)?;
        let active: Vec<usize> = ep.active_base().iter().map(|l| l - 1).collect();
        let t = self.support(&mut g, f_s, g_s, &labels, &active)?;
        self.snapshot(&g, &t)
    }

    pub fn snapshot(&self, g: &Graph, t: &TaskVars) -> Result<TaskState> {
        let w_star = g.value(t.w_star).clone();
        w_star.ensure_finite("process_support")?;
        Ok(TaskState {
            c: g.value(t.c).clone(),
            omega_pre: g.value(t.omega_pre).clone(),
            omega_meta: g.value(t.omega_meta).clone(),
            prototypes: g.value(t.prototypes).clone(),
            c_star: g.value(t.c_star).clone(),
            w_star,
            m: t.m.map(|m| g.value(m).clone()),
            metric_mode: self.net.config.metric,
            active_base: t.active_base.clone(),
            n_base: self.net.config.n_base,
            n_way: self.net.config.n_way,
        })
    }

    /// Combined features `z` of a batch of inputs under a task's mixture.
    pub fn combined_features(&self, params: &ParamStore, state: &TaskState, inputs: &[&RealArray]) -> Result<Parts> {
        let mut g = Graph::new(params);
        let (f, gf) = self.features(&mut g, inputs)?;
        let wp = g.constant(state.omega_pre.clone())?;
        let wm = g.constant(state.omega_meta.clone())?;
        let weighted_pre = g.tape.mul_row(f, wp)?;
        let weighted_meta = g.tape.mul_row(gf, wm)?;
        let z = g.tape.add(weighted_pre, weighted_meta)?;
        Ok(Parts {
            f: g.value(f).clone(),
            g: g.value(gf).clone(),
            weighted_pre: g.value(weighted_pre).clone(),
            weighted_meta: g.value(weighted_meta).clone(),
            z: g.value(z).clone(),
        })
    }

    /// Scores of combined feature rows `z` over the `w_star` columns.
    pub fn scores(&self, params: &ParamStore, state: &TaskState, z: &RealArray) -> Result<RealArray> {
        let mut g = Graph::new(params);
        let zv = g.constant(z.clone())?;
        let w = g.constant(state.w_star.clone())?;
        let (m, tau) = match state.metric_mode {
            MetricMode::EuclideanProjected => {
                let m = state
                    .m
                    .as_ref()
                    .ok_or_else(|| Error::Invalid("euclidean classification needs the projection M".into()))?;
                (Some(g.constant(m.clone())?), None)
            }
            MetricMode::Cosine => (None, Some(g.param("classifier.tau")?)),
        };
        let s = scores_on(&mut g, zv, w, m, tau)?;
        Ok(g.value(s).clone())
    }

    /// Posteriors over all `n_base + n_way` episode classes, one row per
    /// input; masked base classes get probability zero.
    pub fn classify(&self, params: &ParamStore, state: &TaskState, inputs: &[&RealArray]) -> Result<Vec<Vec<f64>>> {
        let z = self.combined_features(params, state, inputs)?.z;
        let s = self.scores(params, state, &z)?;
        Ok((0..s.rows()).map(|i| state.expand(&softmax(s.row_slice(i)))).collect())
    }
}

/// Per-query feature pieces under a task's mixture weights.
#[derive(Clone, Debug)]
pub struct Parts {
    pub f: RealArray,
    pub g: RealArray,
    pub weighted_pre: RealArray,
    pub weighted_meta: RealArray,
    pub z: RealArray,
}

/// One-hot `[a, N_b]` map from active base columns to all base columns.
fn selection_matrix(active: &[usize], nb: usize) -> RealArray {
    let mut s = RealArray::zeros(&[active.len(), nb]);
    for (i, &b) in active.iter().enumerate() {
        s.data_mut()[i * nb + b] = 1.0;
    }
    s
}

fn novel_indices(ep: &Episode) -> Result<Vec<usize>> {
    ep.support
        .iter()
        .map(|r| {
            if r.label > ep.n_base && r.label <= ep.n_base + ep.n_way {
                Ok(r.label - ep.n_base - 1)
            } else {
                Err(Error::Invalid(format!("support label {} is not a novel class", r.label)))
            }
        })
        .collect()
}

fn column_of(label: usize, n_base: usize, active: &[usize], n_active: usize) -> Result<usize> {
    if label == 0 {
        return Err(Error::Invalid("episode labels are 1-based".into()));
    }
    if label <= n_base {
        active
            .binary_search(&(label - 1))
            .map_err(|_| Error::Invalid(format!("query of masked base class {label}")))
    } else {
        Ok(n_active + label - n_base - 1)
    }
}
