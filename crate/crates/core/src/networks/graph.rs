use std::collections::HashMap;

use crate::error::Result;
use crate::numerics::{ParamStore, RealArray, Tape, Var};

/// A tape bound to a parameter store. Parameters are registered on first
/// use and reused afterwards.
pub struct Graph<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    bound: HashMap<String, Var>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.tape.leaf(name, self.params.get(name)?)?;
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn constant(&mut self, array: RealArray) -> Result<Var> {
        self.tape.constant(array)
    }

    pub fn value(&self, v: Var) -> &RealArray {
        self.tape.value(v)
    }

    /// `x @ {prefix}.w + {prefix}.b`
    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.w"))?;
        let b = self.param(&format!("{prefix}.b"))?;
        let y = self.tape.matmul(x, w)?;
        self.tape.add_row(y, b)
    }

    pub fn linear_relu(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let y = self.linear(x, prefix)?;
        self.tape.relu(y)
    }
}
