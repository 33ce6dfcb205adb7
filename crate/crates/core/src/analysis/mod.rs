//! Clustering quality, posterior confidence and raw feature export for
//! trained models.
//!
//! Centroids of novel classes are the support prototypes. Base classes have
//! no support samples, so their centroid is the (conditioned) classifier
//! weight row.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{sample_episode, write_tensor, BaseQueries, DatasetSplits, Dtype, Episode, EpisodeSpec, Phase};
use crate::error::{Error, Result};
use crate::networks::{Networks, Stages};
use crate::numerics::{sq_dist, ParamStore, RealArray};
use crate::tar::{Pipeline, TaskState};
use crate::train::{episode_seeds, thread_pool};


/// Which features and centroids SSE is measured on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SseMode {
    /// Combined features against task-adapted centroids.
    Tar,
    /// Backbone features against backbone prototypes and pretrained weights.
    BaseOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub episodes: usize,
    pub n_way: usize,
    pub k_shot: usize,
    /// Queries drawn from every analysed class.
    pub queries_per_class: usize,
    /// Base classes analysed per episode.
    pub base_classes: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            episodes: 100,
            n_way: 5,
            k_shot: 5,
            queries_per_class: 50,
            base_classes: 5,
        }
    }
}

impl AnalysisConfig {
    pub fn episode_spec(&self, feature_dim: usize) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot: self.k_shot,
            q_per_class: self.queries_per_class,
            fake_novel: false,
            base_queries: BaseQueries::Balanced {
                classes: self.base_classes,
            },
            feature_dim: Some(feature_dim),
        }
    }
}

/// Sum of squared distances of `points` rows to `centroid`.
pub fn sse(points: &RealArray, centroid: &[f64]) -> Result<f64> {
    if points.rows() == 0 {
        return Err(Error::Insufficient("sse of an empty class".into()));
    }
    if points.cols() != centroid.len() {
        return Err(Error::shape("sse", format!("{:?} vs centroid {}", points.shape(), centroid.len())));
    }
    Ok((0..points.rows()).map(|i| sq_dist(points.row_slice(i), centroid)).sum())
}

/// Each SSE divided by the squared distance from its centroid to the
/// nearest other centroid.
pub fn nsse(sse: &[f64], centroids: &RealArray) -> Result<Vec<f64>> {
    let n = centroids.rows();
    if n < 2 {
        return Err(Error::Insufficient("nsse needs at least two centroids".into()));
    }
    if sse.len() != n {
        return Err(Error::shape("nsse", format!("{} sse values for {n} centroids", sse.len())));
    }
    (0..n)
        .map(|k| {
            let nearest = (0..n)
                .filter(|&j| j != k)
                .map(|j| sq_dist(centroids.row_slice(k), centroids.row_slice(j)))
                .fold(f64::INFINITY, f64::min);
            if nearest <= 0.0 {
                return Err(Error::Invalid(format!("centroid {k} duplicates another centroid")));
            }
            Ok(sse[k] / nearest)
        })
        .collect()
}

/// Relative change `(after - before) / before`.
pub fn reduction(before: f64, after: f64) -> f64 {
    (after - before) / before
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCluster {
    /// Episode label (1-based).
    pub label: usize,
    pub novel: bool,
    pub sse: f64,
    pub nsse: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterMeans {
    pub sse: f64,
    pub nsse: f64,
}

impl ClusterMeans {
    pub fn reduction_from(&self, before: &Self) -> Self {
        Self {
            sse: reduction(before.sse, self.sse),
            nsse: reduction(before.nsse, self.nsse),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub classes: Vec<ClassCluster>,
    pub base: ClusterMeans,
    pub novel: ClusterMeans,
}

impl ClusterReport {
    pub fn from_classes(classes: Vec<ClassCluster>) -> Self {
        let group = |novel: bool| ClusterMeans {
            sse: mean(classes.iter().filter(|c| c.novel == novel).map(|c| c.sse)),
            nsse: mean(classes.iter().filter(|c| c.novel == novel).map(|c| c.nsse)),
        };
        Self {
            base: group(false),
            novel: group(true),
            classes,
        }
    }
}

/// Mean cross-entropy `e` and Shannon entropy `h` (natural log) of one
/// query group.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyMeans {
    pub e: f64,
    pub h: f64,
}

impl EntropyMeans {
    pub fn reduction_from(&self, before: &Self) -> Self {
        Self {
            e: reduction(before.e, self.e),
            h: reduction(before.h, self.h),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyReport {
    pub base: EntropyMeans,
    pub novel: EntropyMeans,
    pub base_queries: usize,
    pub novel_queries: usize,
}

/// `-ln p[truth]`.
pub fn cross_entropy(posterior: &[f64], truth: usize) -> f64 {
    -posterior[truth].ln()
}

/// `-sum p ln p`, with `0 ln 0 = 0`.
pub fn shannon_entropy(posterior: &[f64]) -> f64 {
    -posterior.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

/// Rows of `state`'s centroids: active base classes then novel classes,
/// with their episode labels.
pub fn centroids(state: &TaskState) -> Result<(RealArray, Vec<usize>)> {
    let a = state.active_base.len();
    let mut rows: Vec<&[f64]> = (0..a).map(|i| state.w_star.row_slice(i)).collect();
    rows.extend((0..state.n_way).map(|k| state.prototypes.row_slice(k)));
    let labels = state
        .active_base
        .iter()
        .map(|b| b + 1)
        .chain((0..state.n_way).map(|k| state.n_base + 1 + k))
        .collect();
    Ok((RealArray::stack_rows(&rows)?, labels))
}

fn mode_stages(stages: Stages, mode: SseMode) -> Stages {
    match mode {
        SseMode::Tar => stages,
        SseMode::BaseOnly => Stages::none(),
    }
}

fn query_inputs<'a>(splits: &'a DatasetSplits, ep: &Episode) -> Vec<&'a RealArray> {
    ep.queries().map(|q| &splits.sample(q.split, q.index).input).collect()
}

/// Per-class SSE and nSSE of every query class of one episode.
pub fn episode_clusters(
    net: &Networks,
    params: &ParamStore,
    splits: &DatasetSplits,
    ep: &Episode,
    stages: Stages,
    mode: SseMode,
) -> Result<Vec<ClassCluster>> {
    let pipe = Pipeline::new(net, mode_stages(stages, mode))?;
    let state = pipe.process_support(params, splits, ep)?;
    let parts = pipe.combined_features(params, &state, &query_inputs(splits, ep))?;
    let feats = match mode {
        SseMode::Tar => &parts.z,
        SseMode::BaseOnly => &parts.f,
    };
    let (cents, cent_labels) = centroids(&state)?;
    let mut groups: BTreeMap<usize, Vec<&[f64]>> = BTreeMap::new();
    for (i, q) in ep.queries().enumerate() {
        groups.entry(q.label).or_default().push(feats.row_slice(i));
    }
    let sse_all: Vec<f64> = cent_labels
        .iter()
        .enumerate()
        .map(|(i, l)| match groups.get(l) {
            Some(rows) => sse(&RealArray::stack_rows(rows)?, cents.row_slice(i)),
            None => Ok(0.0),
        })
        .collect::<Result<_>>()?;
    let nsse_all = nsse(&sse_all, &cents)?;
    Ok(cent_labels
        .iter()
        .enumerate()
        .filter(|(_, l)| groups.contains_key(l))
        .map(|(i, &label)| ClassCluster {
            label,
            novel: label > ep.n_base,
            sse: sse_all[i],
            nsse: nsse_all[i],
        })
        .collect())
}

/// Per-query `(cross-entropy, entropy, is_novel)` of one episode.
pub fn episode_entropies(
    net: &Networks,
    params: &ParamStore,
    splits: &DatasetSplits,
    ep: &Episode,
    stages: Stages,
) -> Result<Vec<(f64, f64, bool)>> {
    let pipe = Pipeline::new(net, stages)?;
    let state = pipe.process_support(params, splits, ep)?;
    let post = pipe.classify(params, &state, &query_inputs(splits, ep))?;
    Ok(ep
        .queries()
        .zip(&post)
        .map(|(q, p)| (cross_entropy(p, q.label - 1), shannon_entropy(p), q.label > ep.n_base))
        .collect())
}

pub fn entropy_report(per_query: &[(f64, f64, bool)]) -> EntropyReport {
    let group = |novel: bool| EntropyMeans {
        e: mean(per_query.iter().filter(|q| q.2 == novel).map(|q| q.0)),
        h: mean(per_query.iter().filter(|q| q.2 == novel).map(|q| q.1)),
    };
    EntropyReport {
        base: group(false),
        novel: group(true),
        base_queries: per_query.iter().filter(|q| !q.2).count(),
        novel_queries: per_query.iter().filter(|q| q.2).count(),
    }
}

/// Clustering and entropy summaries of one trained model over test episodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub stages: Stages,
    pub mode: SseMode,
    pub clusters: ClusterReport,
    pub entropy: EntropyReport,
}

/// Change of every analysis mean relative to a reference method.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub sse_base: f64,
    pub sse_novel: f64,
    pub nsse_base: f64,
    pub nsse_novel: f64,
    pub e_base: f64,
    pub e_novel: f64,
    pub h_base: f64,
    pub h_novel: f64,
}

impl AnalysisReport {
    pub fn reductions_from(&self, before: &Self) -> Reductions {
        let b = self.clusters.base.reduction_from(&before.clusters.base);
        let n = self.clusters.novel.reduction_from(&before.clusters.novel);
        let eb = self.entropy.base.reduction_from(&before.entropy.base);
        let en = self.entropy.novel.reduction_from(&before.entropy.novel);
        Reductions {
            sse_base: b.sse,
            sse_novel: n.sse,
            nsse_base: b.nsse,
            nsse_novel: n.nsse,
            e_base: eb.e,
            e_novel: en.e,
            h_base: eb.h,
            h_novel: en.h,
        }
    }
}

/// Runs clustering and entropy analysis over `config.episodes` test
/// episodes. The Imprint-style reference is `Stages::none()` with
/// `SseMode::BaseOnly`.
pub fn analyze(
    net: &Networks,
    params: &ParamStore,
    splits: &DatasetSplits,
    stages: Stages,
    mode: SseMode,
    config: &AnalysisConfig,
    seed: u64,
) -> Result<AnalysisReport> {
    stages.validate()?;
    let spec = config.episode_spec(net.d());
    let seeds = episode_seeds(seed, config.episodes);
    let pool = thread_pool()?;
    let per_episode: Vec<(Vec<ClassCluster>, Vec<(f64, f64, bool)>)> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let ep = sample_episode(splits, Phase::Test, &spec, s)?;
                Ok((
                    episode_clusters(net, params, splits, &ep, stages, mode)?,
                    episode_entropies(net, params, splits, &ep, stages)?,
                ))
            })
            .collect::<Result<_>>()
    })?;
    let (classes, queries): (Vec<_>, Vec<_>) = per_episode.into_iter().unzip();
    let queries: Vec<(f64, f64, bool)> = queries.into_iter().flatten().collect();
    Ok(AnalysisReport {
        stages,
        mode,
        clusters: ClusterReport::from_classes(classes.into_iter().flatten().collect()),
        entropy: entropy_report(&queries),
    })
}

/// Writes `clustering.csv` and `entropy.csv`, one row per method.
pub fn write_tables(dir: &Path, rows: &[(String, AnalysisReport)]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut clustering = String::from("method,sse_base,sse_novel,nsse_base,nsse_novel\n");
    let mut entropy = String::from("method,e_base,e_novel,h_base,h_novel\n");
    for (name, r) in rows {
        let c = &r.clusters;
        clustering.push_str(&format!("{name},{},{},{},{}\n", c.base.sse, c.novel.sse, c.base.nsse, c.novel.nsse));
        let e = &r.entropy;
        entropy.push_str(&format!("{name},{},{},{},{}\n", e.base.e, e.novel.e, e.base.h, e.novel.h));
    }
    for (file, text) in [("clustering.csv", clustering), ("entropy.csv", entropy)] {
        let path = dir.join(file);
        std::fs::File::create(&path)
            .and_then(|mut f| f.write_all(text.as_bytes()))
            .map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Contents of `index.json` next to exported feature tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportIndex {
    pub n_base: usize,
    pub n_way: usize,
    pub queries: usize,
    pub feature_dim: usize,
    /// Episode label of every query row.
    pub labels: Vec<usize>,
    /// Episode label of every centroid row.
    pub centroid_labels: Vec<usize>,
    /// Tensor name -> file name.
    pub files: BTreeMap<String, String>,
}

pub const EXPORTED_TENSORS: [&str; 6] = ["weighted_pre", "weighted_meta", "combined", "labels", "centroids", "centroid_labels"];

/// Writes the weighted backbone features, weighted meta features and
/// combined features of every query of `ep`, plus labels and centroids, as
/// f64 tensor files with a JSON index in `dir`.
pub fn export_features(
    pipe: &Pipeline,
    params: &ParamStore,
    splits: &DatasetSplits,
    ep: &Episode,
    state: &TaskState,
    dir: &Path,
) -> Result<ExportIndex> {
    let parts = pipe.combined_features(params, state, &query_inputs(splits, ep))?;
    let (cents, centroid_labels) = centroids(state)?;
    let labels: Vec<usize> = ep.queries().map(|q| q.label).collect();
    let as_row = |v: &[usize]| RealArray::new(vec![v.len()], v.iter().map(|&l| l as f64).collect());
    let tensors = [
        parts.weighted_pre,
        parts.weighted_meta,
        parts.z,
        as_row(&labels)?,
        cents,
        as_row(&centroid_labels)?,
    ];
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = BTreeMap::new();
    for (name, t) in EXPORTED_TENSORS.iter().zip(&tensors) {
        let file = format!("{name}.xtds");
        write_tensor(&dir.join(&file), t, Dtype::F64)?;
        files.insert(name.to_string(), file);
    }
    let index = ExportIndex {
        n_base: ep.n_base,
        n_way: ep.n_way,
        queries: labels.len(),
        feature_dim: pipe.net.d(),
        labels,
        centroid_labels,
        files,
    };
    let path = dir.join("index.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&index)?).map_err(|e| Error::io(&path, e))?;
    Ok(index)
}
