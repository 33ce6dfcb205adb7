//! Deterministic synthetic datasets: one random template per class plus
//! isotropic Gaussian perturbations.
//!
//! With `subspace_rank = r > 0`, base-class templates are drawn from one
//! random `r`-dimensional subspace of the input space and all novel-class
//! templates from a second subspace orthogonal to it. A backbone pretrained
//! on base classes then has no training signal along the novel directions,
//! which is the regime where extra novel-feature extractors matter.
//!
//! `novel_base_overlap = a` mixes each novel template as
//! `a * t_base + sqrt(1 - a^2) * t_novel` with `t_base` the template of a
//! random base class, so novel classes are confusable with base classes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::splits::{DatasetSplits, LabeledSample, Split, SplitData};
use crate::error::{Error, Result};
use crate::numerics::RealArray;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub base_classes: usize,
    pub novel_train_classes: usize,
    pub novel_val_classes: usize,
    pub novel_test_classes: usize,
    /// Samples per base class, divided among base/train, base/val and
    /// base/test by `base_fractions`.
    pub base_per_class: usize,
    pub base_fractions: [f64; 3],
    pub novel_per_class: usize,
    pub input_shape: Vec<usize>,
    pub cluster_spread: f64,
    pub subspace_rank: usize,
    pub novel_base_overlap: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            base_classes: 20,
            novel_train_classes: 30,
            novel_val_classes: 10,
            novel_test_classes: 10,
            base_per_class: 100,
            base_fractions: [0.6, 0.2, 0.2],
            novel_per_class: 30,
            input_shape: vec![64],
            cluster_spread: 0.5,
            subspace_rank: 16,
            novel_base_overlap: 0.0,
        }
    }
}

impl SynthConfig {
    /// Desk-scale ablation benchmark: 20 base classes, many meta-training
    /// classes, and novel classes that overlap base classes and are spread
    /// widely enough to keep joint accuracy off the ceiling.
    pub fn benchmark() -> Self {
        Self {
            novel_train_classes: 200,
            cluster_spread: 1.2,
            novel_base_overlap: 0.75,
            ..Self::default()
        }
    }
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// `count` orthonormal vectors of length `dim` (Gram-Schmidt on Gaussians).
fn orthonormal_basis<R: Rng + ?Sized>(dim: usize, count: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        for b in &basis {
            let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= p * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-8 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

fn template<R: Rng + ?Sized>(dim: usize, basis: Option<&[Vec<f64>]>, rng: &mut R) -> Vec<f64> {
    match basis {
        None => (0..dim).map(|_| gaussian(rng)).collect(),
        Some(b) => {
            // unit variance per input coordinate on average
            let scale = (dim as f64 / b.len() as f64).sqrt();
            let mut t = vec![0.0; dim];
            for u in b {
                let a = gaussian(rng) * scale;
                for (x, y) in t.iter_mut().zip(u) {
                    *x += a * y;
                }
            }
            t
        }
    }
}

fn samples<R: Rng + ?Sized>(
    tmpl: &[f64],
    count: usize,
    spread: f64,
    shape: &[usize],
    class: u32,
    split: Split,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    (0..count)
        .map(|_| {
            let data = tmpl.iter().map(|t| t + spread * gaussian(rng)).collect();
            Ok(LabeledSample {
                input: RealArray::new(shape.to_vec(), data)?,
                label: class,
                source_split: split,
            })
        })
        .collect()
}

/// Base classes get ids `1..=base_classes`; novel train, val and test
/// classes follow consecutively.
pub fn generate_synthetic<R: Rng + ?Sized>(config: &SynthConfig, rng: &mut R) -> Result<DatasetSplits> {
    let c = config;
    if c.base_classes == 0 || c.base_per_class == 0 || c.novel_per_class == 0 {
        return Err(Error::Invalid("synthetic class and sample counts must be positive".into()));
    }
    if c.input_shape.is_empty() || c.input_shape.iter().any(|&d| d == 0) {
        return Err(Error::Invalid("input shape must have positive extents".into()));
    }
    if c.cluster_spread < 0.0 || !c.cluster_spread.is_finite() {
        return Err(Error::Invalid("cluster spread must be finite and non-negative".into()));
    }
    if !(0.0..=1.0).contains(&c.novel_base_overlap) {
        return Err(Error::Invalid("novel/base overlap must lie in [0, 1]".into()));
    }
    let dim: usize = c.input_shape.iter().product();
    let (base_basis, novel_basis) = if c.subspace_rank > 0 {
        if 2 * c.subspace_rank > dim {
            return Err(Error::Invalid(format!(
                "two rank-{} subspaces do not fit in {dim} dimensions",
                c.subspace_rank
            )));
        }
        let mut all = orthonormal_basis(dim, 2 * c.subspace_rank, rng);
        let novel = all.split_off(c.subspace_rank);
        (Some(all), Some(novel))
    } else {
        (None, None)
    };

    let mut per_split: BTreeMap<Split, Vec<LabeledSample>> = BTreeMap::new();
    let frac_sum: f64 = c.base_fractions.iter().sum();
    let n_train = ((c.base_per_class as f64) * c.base_fractions[0] / frac_sum).round() as usize;
    let n_val = ((c.base_per_class as f64) * c.base_fractions[1] / frac_sum).round() as usize;
    let n_train = n_train.min(c.base_per_class);
    let n_val = n_val.min(c.base_per_class - n_train);

    let mut base_templates = Vec::with_capacity(c.base_classes);
    for k in 0..c.base_classes {
        let class = (k + 1) as u32;
        let t = template(dim, base_basis.as_deref(), rng);
        base_templates.push(t.clone());
        let mut all = samples(&t, c.base_per_class, c.cluster_spread, &c.input_shape, class, Split::BaseTrain, rng)?;
        all.shuffle(rng);
        for (i, mut s) in all.into_iter().enumerate() {
            s.source_split = if i < n_train {
                Split::BaseTrain
            } else if i < n_train + n_val {
                Split::BaseVal
            } else {
                Split::BaseTest
            };
            per_split.entry(s.source_split).or_default().push(s);
        }
    }

    let mut next = c.base_classes as u32 + 1;
    for (split, count) in [
        (Split::NovelTrain, c.novel_train_classes),
        (Split::NovelVal, c.novel_val_classes),
        (Split::NovelTest, c.novel_test_classes),
    ] {
        for _ in 0..count {
            let mut t = template(dim, novel_basis.as_deref(), rng);
            let a = c.novel_base_overlap;
            if a > 0.0 {
                let b = &base_templates[rng.gen_range(0..base_templates.len())];
                let keep = (1.0 - a * a).sqrt();
                for (x, y) in t.iter_mut().zip(b) {
                    *x = keep * *x + a * y;
                }
            }
            let s = samples(&t, c.novel_per_class, c.cluster_spread, &c.input_shape, next, split, rng)?;
            per_split.entry(split).or_default().extend(s);
            next += 1;
        }
    }

    let splits = per_split
        .into_iter()
        .map(|(k, v)| (k, SplitData::new(v)))
        .collect();
    DatasetSplits::new(c.input_shape.clone(), splits)
}
