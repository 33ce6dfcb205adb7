use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::array::RealArray;
use crate::error::{Error, Result};

/// Named parameter arrays, ordered by name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore(BTreeMap<String, RealArray>);

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, array: RealArray) {
        self.0.insert(name.into(), array);
    }

    pub fn get(&self, name: &str) -> Result<&RealArray> {
        self.0.get(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut RealArray> {
        self.0.get_mut(name).ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.0.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &RealArray)> {
        self.0.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Names of all arrays currently marked trainable.
    pub fn trainable(&self) -> Vec<String> {
        self.0
            .iter()
            .filter(|(_, a)| a.requires_grad)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Sets `requires_grad` on every array whose name satisfies `pred`, and
    /// clears it on all others.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for (k, a) in self.0.iter_mut() {
            a.requires_grad = pred(k);
        }
    }
}

impl FromIterator<(String, RealArray)> for ParamStore {
    fn from_iter<I: IntoIterator<Item = (String, RealArray)>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}
