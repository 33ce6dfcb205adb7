//! XTDS binary tensor files.
//!
//! Layout (all little-endian):
//!
//! | offset | size      | field                          |
//! |--------|-----------|--------------------------------|
//! | 0      | 4         | magic `XTDS`                   |
//! | 4      | 2         | version (`u16`, currently 1)   |
//! | 6      | 1         | dtype (1 = f32, 2 = f64)       |
//! | 7      | 1         | rank                           |
//! | 8      | 8         | reserved, zero                 |
//! | 16     | 4 * rank  | extents (`u32`)                |
//! | ...    | n * width | row-major values               |

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RealArray;

pub const MAGIC: &[u8; 4] = b"XTDS";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 16;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::F64 => 2,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

pub fn encode(array: &RealArray, dtype: Dtype) -> Vec<u8> {
    let rank = array.shape().len();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * rank + array.len() * dtype.width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(dtype.code());
    out.push(rank as u8);
    out.extend_from_slice(&[0u8; 8]);
    for &e in array.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in array.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }
    out
}

fn corrupt(detail: impl Into<String>) -> Error {
    Error::Corrupt {
        kind: "tensor file",
        detail: detail.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<RealArray> {
    if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
        return Err(corrupt("bad magic or short header"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::Version {
            kind: "tensor file",
            found: version as u32,
            expected: VERSION as u32,
        });
    }
    let dtype = match bytes[6] {
        1 => Dtype::F32,
        2 => Dtype::F64,
        other => return Err(corrupt(format!("unknown dtype code {other}"))),
    };
    let rank = bytes[7] as usize;
    let ext_end = HEADER_LEN + 4 * rank;
    if bytes.len() < ext_end {
        return Err(corrupt("truncated extents"));
    }
    let shape: Vec<usize> = bytes[HEADER_LEN..ext_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let body = &bytes[ext_end..];
    if body.len() != n * dtype.width() {
        return Err(corrupt(format!(
            "expected {} value bytes, found {}",
            n * dtype.width(),
            body.len()
        )));
    }
    let data = match dtype {
        Dtype::F32 => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        Dtype::F64 => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect(),
    };
    RealArray::new(shape, data)
}

pub fn write_tensor(path: &Path, array: &RealArray, dtype: Dtype) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, encode(array, dtype)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<RealArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
