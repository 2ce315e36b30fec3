//! `OCF1` tensor files: magic `OCF1`, a `u8` rank, `rank` little-endian `u32`
//! dims, then `product(dims)` little-endian `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 4] = b"OCF1";

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(5 + 4 * t.rank() + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Parses an `OCF1` payload. Structural problems are format errors;
/// NaN/Inf values are data errors.
pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let rest = bytes
        .strip_prefix(MAGIC)
        .ok_or_else(|| Error::Format("missing OCF1 magic".into()))?;
    let (&rank, rest) = rest
        .split_first()
        .ok_or_else(|| Error::Format("truncated header: no rank byte".into()))?;
    if rank == 0 {
        return Err(Error::Format("rank 0 tensors are not supported".into()));
    }
    let header = 4 * rank as usize;
    if rest.len() < header {
        return Err(Error::Format(format!(
            "truncated header: rank {rank} needs {header} dim bytes"
        )));
    }
    let (dim_bytes, payload) = rest.split_at(header);
    let shape: Vec<usize> = dim_bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    if shape.contains(&0) {
        return Err(Error::Format(format!("zero dimension in {shape:?}")));
    }
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|n| n.checked_mul(4).is_some())
        .ok_or_else(|| Error::Format(format!("shape {shape:?} overflows")))?;
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "shape {shape:?} declares {count} values but payload holds {} bytes",
            payload.len()
        )));
    }
    let data: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!("non-finite value at index {pos}")));
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Reads a feature file and checks its shape against `expected`.
pub fn load_features(path: &Path, expected: &[usize]) -> Result<Tensor> {
    let t = read_tensor(path)?;
    if t.shape() != expected {
        return Err(Error::Format(format!(
            "{}: shape {:?}, expected {expected:?}",
            path.display(),
            t.shape()
        )));
    }
    Ok(t)
}

/// Global and grid features of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeatures {
    /// `[d_fc]`
    pub fc: Tensor,
    /// `[N × d_loc]`
    pub spatial: Tensor,
}

impl ImageFeatures {
    pub fn new(fc: Tensor, spatial: Tensor) -> Result<Self> {
        if fc.rank() != 1 || spatial.rank() != 2 {
            return Err(Error::dim(format!(
                "fc {:?} must be rank 1 and spatial {:?} rank 2",
                fc.shape(),
                spatial.shape()
            )));
        }
        if !fc.is_finite() || !spatial.is_finite() {
            return Err(Error::Data("non-finite image features".into()));
        }
        Ok(Self { fc, spatial })
    }

    pub fn grid_cells(&self) -> usize {
        self.spatial.shape()[0]
    }
}
