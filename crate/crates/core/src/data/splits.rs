//! Base/novel dataset splits and their on-disk manifest.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tensor_file::{read_tensor, write_tensor, Dtype};
use crate::error::{Error, Result};
use crate::numerics::RealArray;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Split {
    #[serde(rename = "base/train")]
    BaseTrain,
    #[serde(rename = "base/val")]
    BaseVal,
    #[serde(rename = "base/test")]
    BaseTest,
    #[serde(rename = "novel/train")]
    NovelTrain,
    #[serde(rename = "novel/val")]
    NovelVal,
    #[serde(rename = "novel/test")]
    NovelTest,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::BaseTrain,
        Split::BaseVal,
        Split::BaseTest,
        Split::NovelTrain,
        Split::NovelVal,
        Split::NovelTest,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::BaseTrain => "base/train",
            Split::BaseVal => "base/val",
            Split::BaseTest => "base/test",
            Split::NovelTrain => "novel/train",
            Split::NovelVal => "novel/val",
            Split::NovelTest => "novel/test",
        }
    }

    pub fn is_base(self) -> bool {
        matches!(self, Split::BaseTrain | Split::BaseVal | Split::BaseTest)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.as_str() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown split {s}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSample {
    pub input: RealArray,
    pub label: u32,
    pub source_split: Split,
}

/// Samples of one split, grouped by class.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SplitData {
    pub samples: Vec<LabeledSample>,
    by_class: BTreeMap<u32, Vec<usize>>,
}

impl SplitData {
    pub fn new(samples: Vec<LabeledSample>) -> Self {
        let mut by_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class.entry(s.label).or_default().push(i);
        }
        Self { samples, by_class }
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.by_class.keys().copied().collect()
    }

    pub fn indices_of(&self, class: u32) -> &[usize] {
        self.by_class.get(&class).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// The six sample collections. Base class ids are mapped to 1-based base
/// labels by their sorted position in `base_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplits {
    pub input_shape: Vec<usize>,
    pub base_classes: Vec<u32>,
    splits: BTreeMap<Split, SplitData>,
}

impl DatasetSplits {
    /// Validates class universes: all base splits share one class set, and
    /// the novel splits are pairwise disjoint.
    pub fn new(input_shape: Vec<usize>, splits: BTreeMap<Split, SplitData>) -> Result<Self> {
        let mut splits = splits;
        for sp in Split::ALL {
            splits.entry(sp).or_default();
        }
        for data in splits.values() {
            if let Some(s) = data.samples.iter().find(|s| s.input.shape() != input_shape.as_slice()) {
                return Err(Error::shape(
                    "load_dataset",
                    format!("sample shape {:?} != {:?}", s.input.shape(), input_shape),
                ));
            }
        }
        let base_classes = splits[&Split::BaseTrain].class_ids();
        for sp in [Split::BaseVal, Split::BaseTest] {
            let ids = splits[&sp].class_ids();
            if !ids.is_empty() && ids != base_classes {
                return Err(Error::Invalid(format!(
                    "{sp} classes differ from base/train classes"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for sp in [Split::NovelTrain, Split::NovelVal, Split::NovelTest] {
            for id in splits[&sp].class_ids() {
                if !seen.insert(id) {
                    return Err(Error::NovelOverlap(id));
                }
            }
        }
        Ok(Self {
            input_shape,
            base_classes,
            splits,
        })
    }

    pub fn n_base(&self) -> usize {
        self.base_classes.len()
    }

    pub fn split(&self, sp: Split) -> &SplitData {
        &self.splits[&sp]
    }

    /// 1-based base label of an original base class id.
    pub fn base_label(&self, class: u32) -> Option<usize> {
        self.base_classes.binary_search(&class).ok().map(|i| i + 1)
    }

    pub fn sample(&self, sp: Split, index: usize) -> &LabeledSample {
        &self.splits[&sp].samples[index]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub class_ids: Vec<u32>,
    pub files: Vec<String>,
}

/// JSON manifest: one tensor file (`[count, ...input_shape]`) per class and
/// split, with paths relative to the manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub input_shape: Vec<usize>,
    #[serde(default)]
    pub dtype: Dtype,
    pub splits: BTreeMap<Split, ManifestSplit>,
}

pub const MANIFEST_VERSION: u32 = 1;

pub fn load_dataset(manifest_path: &Path) -> Result<DatasetSplits> {
    let text = fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Version {
            kind: "manifest",
            found: manifest.version,
            expected: MANIFEST_VERSION,
        });
    }
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut splits = BTreeMap::new();
    for (sp, entry) in &manifest.splits {
        if entry.class_ids.len() != entry.files.len() {
            return Err(Error::Invalid(format!(
                "{sp}: {} class ids but {} files",
                entry.class_ids.len(),
                entry.files.len()
            )));
        }
        let mut samples = Vec::new();
        for (&class, file) in entry.class_ids.iter().zip(&entry.files) {
            let tensor = read_tensor(&root.join(file))?;
            if tensor.shape()[1..] != manifest.input_shape[..] {
                return Err(Error::shape(
                    "load_dataset",
                    format!("{file}: {:?} vs input shape {:?}", tensor.shape(), manifest.input_shape),
                ));
            }
            for i in 0..tensor.rows() {
                let input = RealArray::new(manifest.input_shape.clone(), tensor.row_slice(i).to_vec())?;
                samples.push(LabeledSample {
                    input,
                    label: class,
                    source_split: *sp,
                });
            }
        }
        splits.insert(*sp, SplitData::new(samples));
    }
    DatasetSplits::new(manifest.input_shape, splits)
}

/// Writes every split as per-class tensor files next to `manifest_path`.
pub fn save_dataset(splits: &DatasetSplits, manifest_path: &Path, dtype: Dtype) -> Result<()> {
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let mut entries = BTreeMap::new();
    for sp in Split::ALL {
        let data = splits.split(sp);
        let mut entry = ManifestSplit {
            class_ids: Vec::new(),
            files: Vec::new(),
        };
        for class in data.class_ids() {
            let rows: Vec<&[f64]> = data
                .indices_of(class)
                .iter()
                .map(|&i| data.samples[i].input.data())
                .collect();
            let mut shape = vec![rows.len()];
            shape.extend_from_slice(&splits.input_shape);
            let tensor = RealArray::new(shape, rows.concat())?;
            let rel = format!("{}/class_{class}.xtds", sp.as_str().replace('/', "_"));
            write_tensor(&root.join(&rel), &tensor, dtype)?;
            entry.class_ids.push(class);
            entry.files.push(rel);
        }
        entries.insert(sp, entry);
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        input_shape: splits.input_shape.clone(),
        dtype,
        splits: entries,
    };
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    fs::write(manifest_path, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(manifest_path, e))
}
