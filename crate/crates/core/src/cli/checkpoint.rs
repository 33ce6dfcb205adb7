//! Binary checkpoint: magic `XTCK`, then little-endian fields
//!
//! ```text
//! u32 version
//! u64 length + config JSON bytes
//! [u8; 32] SHA-256 of the config JSON
//! u64 episode counter
//! u32 count, then per parameter: record
//! u8 optimizer present; if 1: f64 lr, f64 momentum, f64 weight decay,
//!    u64 step count, u64 decay_every, f64 decay factor,
//!    u32 count, then per velocity: record
//! ```
//!
//! A record is `u32 name length, name bytes, u8 trainable, u32 rank,
//! rank x u64 extents, f64 values`.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::{OptimizerState, ParamStore, RealArray};

pub const MAGIC: &[u8; 4] = b"XTCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    /// Resolved experiment config that produced the parameters.
    pub config_json: String,
    pub episodes: u64,
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn config_hash(&self) -> [u8; 32] {
        Sha256::digest(self.config_json.as_bytes()).into()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.config_json.len() as u64).to_le_bytes());
        out.extend_from_slice(self.config_json.as_bytes());
        out.extend_from_slice(&self.config_hash());
        out.extend_from_slice(&self.episodes.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for (name, a) in self.params.iter() {
            put_record(&mut out, name, a);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                for v in [o.learning_rate, o.momentum, o.weight_decay] {
                    out.extend_from_slice(&v.to_le_bytes());
                }
                out.extend_from_slice(&o.step_count.to_le_bytes());
                out.extend_from_slice(&o.decay_every.to_le_bytes());
                out.extend_from_slice(&o.decay_factor.to_le_bytes());
                out.extend_from_slice(&(o.velocities.len() as u32).to_le_bytes());
                for (name, a) in &o.velocities {
                    put_record(&mut out, name, a);
                }
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version,
                expected: VERSION,
            });
        }
        let len = r.len_u64()?;
        let config_json = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| corrupt("config is not utf-8"))?;
        let hash = r.take(32)?;
        if Sha256::digest(config_json.as_bytes()).as_slice() != hash {
            return Err(corrupt("config hash does not match config"));
        }
        let episodes = r.u64()?;
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let (name, a) = r.record()?;
            params.insert(name, a);
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let (learning_rate, momentum, weight_decay) = (r.f64()?, r.f64()?, r.f64()?);
                let step_count = r.u64()?;
                let decay_every = r.u64()?;
                let decay_factor = r.f64()?;
                let mut velocities = BTreeMap::new();
                for _ in 0..r.u32()? {
                    let (name, a) = r.record()?;
                    velocities.insert(name, a);
                }
                Some(OptimizerState {
                    velocities,
                    learning_rate,
                    momentum,
                    weight_decay,
                    step_count,
                    decay_every,
                    decay_factor,
                })
            }
            other => return Err(corrupt(format!("optimizer flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self {
            config_json,
            episodes,
            params,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "checkpoint",
        detail: detail.into(),
    }
}

fn put_record(out: &mut Vec<u8>, name: &str, a: &RealArray) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(a.requires_grad as u8);
    out.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
    for &e in a.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| corrupt("truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A length that must fit in the remaining bytes.
    fn len_u64(&mut self) -> Result<usize> {
        let n = self.u64()?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.bytes.len() - self.pos)
            .ok_or_else(|| corrupt("length exceeds file"))
    }

    fn record(&mut self) -> Result<(String, RealArray)> {
        let len = self.u32()? as usize;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| corrupt("name is not utf-8"))?;
        let trainable = match self.u8()? {
            0 => false,
            1 => true,
            other => return Err(corrupt(format!("trainable flag {other}"))),
        };
        let rank = self.u32()? as usize;
        let shape = (0..rank)
            .map(|_| self.len_u64())
            .collect::<Result<Vec<usize>>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= self.bytes.len() - self.pos))
            .ok_or_else(|| corrupt(format!("{name}: extents exceed file")))?;
        let data = self
            .take(8 * n)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let a = RealArray::new(shape, data).map_err(|_| corrupt(format!("{name}: bad extents")))?;
        Ok((name, a.with_grad(trainable)))
    }
}
