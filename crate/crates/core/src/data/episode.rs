//! Episodic sampling of support and query sets.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::splits::{DatasetSplits, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    MetaTrain,
    Val,
    Test,
}

impl Phase {
    /// (novel split, base split) that an episode of this phase draws from.
    pub fn sources(self, fake_novel: bool) -> (Split, Split) {
        match self {
            Phase::MetaTrain if fake_novel => (Split::BaseTrain, Split::BaseTrain),
            Phase::MetaTrain => (Split::NovelTrain, Split::BaseTrain),
            Phase::Val => (Split::NovelVal, Split::BaseVal),
            Phase::Test => (Split::NovelTest, Split::BaseTest),
        }
    }
}

/// How base-class queries are drawn.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum BaseQueries {
    /// `n_way * q_per_class` samples drawn uniformly over the base split.
    #[default]
    Uniform,
    /// `q_per_class` samples from each of `classes` random base classes.
    Balanced { classes: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_per_class: usize,
    /// Draw novel classes from base/train and mask their base columns.
    #[serde(default)]
    pub fake_novel: bool,
    #[serde(default)]
    pub base_queries: BaseQueries,
    /// Feature length; `n_way >= feature_dim` is rejected when set.
    #[serde(default)]
    pub feature_dim: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRef {
    pub split: Split,
    pub index: usize,
    /// Episode class: `1..=n_base` for base, `n_base+1..=n_base+n_way` for novel.
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub n_base: usize,
    pub n_way: usize,
    pub support: Vec<SampleRef>,
    pub query_base: Vec<SampleRef>,
    pub query_novel: Vec<SampleRef>,
    /// Original class id -> episode class, for the novel classes.
    pub label_map: BTreeMap<u32, usize>,
    /// 1-based base labels excluded from this episode (fake-novel classes).
    pub masked_base: Vec<usize>,
    pub episode_seed: u64,
}

impl Episode {
    pub fn n_classes(&self) -> usize {
        self.n_base + self.n_way
    }

    /// Queries in classification order: base queries first, then novel.
    pub fn queries(&self) -> impl Iterator<Item = &SampleRef> {
        self.query_base.iter().chain(&self.query_novel)
    }

    /// Base labels taking part in this episode, ascending.
    pub fn active_base(&self) -> Vec<usize> {
        (1..=self.n_base)
            .filter(|l| !self.masked_base.contains(l))
            .collect()
    }
}

/// Samples one episode. Everything is derived from `episode_seed`.
pub fn sample_episode(
    splits: &DatasetSplits,
    phase: Phase,
    spec: &EpisodeSpec,
    episode_seed: u64,
) -> Result<Episode> {
    let EpisodeSpec {
        n_way,
        k_shot,
        q_per_class,
        ..
    } = *spec;
    if n_way == 0 || k_shot == 0 || q_per_class == 0 {
        return Err(Error::Invalid("n_way, k_shot and q_per_class must be positive".into()));
    }
    if let Some(d) = spec.feature_dim {
        if n_way >= d {
            return Err(Error::Invalid(format!(
                "n_way {n_way} must be below feature length {d}"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(episode_seed);
    let n_base = splits.n_base();
    let (novel_split, base_split) = phase.sources(spec.fake_novel);
    let novel = splits.split(novel_split);

    let eligible: Vec<u32> = novel
        .class_ids()
        .into_iter()
        .filter(|&c| novel.indices_of(c).len() >= k_shot + q_per_class)
        .collect();
    if eligible.len() < n_way {
        return Err(Error::Insufficient(format!(
            "{novel_split} has {} classes with >= {} samples, need {n_way}",
            eligible.len(),
            k_shot + q_per_class
        )));
    }
    let chosen: Vec<u32> = eligible.choose_multiple(&mut rng, n_way).copied().collect();

    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query_novel = Vec::with_capacity(n_way * q_per_class);
    let mut label_map = BTreeMap::new();
    for (k, &class) in chosen.iter().enumerate() {
        let label = n_base + 1 + k;
        label_map.insert(class, label);
        let pool = novel.indices_of(class);
        let picks = index::sample(&mut rng, pool.len(), k_shot + q_per_class);
        for (j, p) in picks.into_iter().enumerate() {
            let r = SampleRef {
                split: novel_split,
                index: pool[p],
                label,
            };
            if j < k_shot {
                support.push(r);
            } else {
                query_novel.push(r);
            }
        }
    }

    let masked_base: Vec<usize> = if spec.fake_novel {
        let mut m: Vec<usize> = chosen.iter().filter_map(|&c| splits.base_label(c)).collect();
        m.sort_unstable();
        m
    } else {
        Vec::new()
    };

    let base = splits.split(base_split);
    let used: BTreeSet<usize> = support
        .iter()
        .chain(&query_novel)
        .filter(|r| r.split == base_split)
        .map(|r| r.index)
        .collect();
    let base_pool: Vec<usize> = (0..base.len())
        .filter(|&i| {
            let s = &base.samples[i];
            let used = used.contains(&i);
            let masked = splits
                .base_label(s.label)
                .map_or(true, |l| masked_base.contains(&l));
            !used && !masked
        })
        .collect();
    let to_ref = |i: usize| -> Result<SampleRef> {
        let label = splits
            .base_label(base.samples[i].label)
            .ok_or_else(|| Error::Invalid("base sample outside base classes".into()))?;
        Ok(SampleRef {
            split: base_split,
            index: i,
            label,
        })
    };
    let n_query = n_way * q_per_class;
    let query_base = match spec.base_queries {
        BaseQueries::Uniform => {
            if base_pool.len() < n_query {
                return Err(Error::Insufficient(format!(
                    "{base_split} has {} usable samples, need {n_query}",
                    base_pool.len()
                )));
            }
            index::sample(&mut rng, base_pool.len(), n_query)
                .into_iter()
                .map(|p| to_ref(base_pool[p]))
                .collect::<Result<Vec<_>>>()?
        }
        BaseQueries::Balanced { classes } => {
            let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for &i in &base_pool {
                by_class.entry(base.samples[i].label).or_default().push(i);
            }
            let ok: Vec<u32> = by_class
                .iter()
                .filter(|(_, v)| v.len() >= q_per_class)
                .map(|(&c, _)| c)
                .collect();
            if ok.len() < classes {
                return Err(Error::Insufficient(format!(
                    "{base_split}: {} base classes with >= {q_per_class} samples, need {classes}",
                    ok.len()
                )));
            }
            let mut picked: Vec<u32> = ok.choose_multiple(&mut rng, classes).copied().collect();
            picked.sort_unstable();
            let mut out = Vec::new();
            for c in picked {
                let pool = &by_class[&c];
                for p in index::sample(&mut rng, pool.len(), q_per_class) {
                    out.push(to_ref(pool[p])?);
                }
            }
            out
        }
    };

    Ok(Episode {
        n_base,
        n_way,
        support,
        query_base,
        query_novel,
        label_map,
        masked_base,
        episode_seed,
    })
}
