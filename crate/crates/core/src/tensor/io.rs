//! `AGT1` binary tensor files.
//!
//! ```text
//! "AGT1" | u8 dtype (0=f32, 1=f64, 2=u8) | u8 rank | rank x u32 LE dims | LE data
//! ```

use std::fs;
use std::path::Path;

use super::{LabelTensor, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"AGT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
    U8,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::U8 => 2,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::U8),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }
}

/// Contents of one tensor file.
#[derive(Clone, Debug, PartialEq)]
pub enum TensorPayload {
    /// Floating point data; f32 files are widened on read.
    Float(Tensor),
    Labels(LabelTensor),
}

impl TensorPayload {
    pub fn into_float(self, path: &Path) -> Result<Tensor> {
        match self {
            TensorPayload::Float(t) => Ok(t),
            TensorPayload::Labels(_) => Err(corrupt(path, "expected float tensor, found u8")),
        }
    }

    pub fn into_labels(self, path: &Path) -> Result<LabelTensor> {
        match self {
            TensorPayload::Labels(t) => Ok(t),
            TensorPayload::Float(_) => Err(corrupt(path, "expected u8 labels, found float")),
        }
    }
}

fn corrupt(path: &Path, reason: impl Into<String>) -> Error {
    Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn header(dtype: DType, shape: &[usize]) -> Result<Vec<u8>> {
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidTensor(format!("rank {} too large", shape.len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * shape.len());
    out.extend_from_slice(MAGIC);
    out.push(dtype.code());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d)
            .map_err(|_| Error::InvalidTensor(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    Ok(out)
}

/// Encodes a payload. `Float` tensors are written as f64 unless `as_f32`.
pub fn encode(payload: &TensorPayload, as_f32: bool) -> Result<Vec<u8>> {
    match payload {
        TensorPayload::Float(t) => {
            let dtype = if as_f32 { DType::F32 } else { DType::F64 };
            let mut out = header(dtype, t.shape())?;
            out.reserve(t.len() * dtype.width());
            for &v in t.data() {
                if as_f32 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            Ok(out)
        }
        TensorPayload::Labels(l) => {
            let mut out = header(DType::U8, l.shape())?;
            out.extend_from_slice(l.data());
            Ok(out)
        }
    }
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<TensorPayload> {
    if bytes.len() < 6 || &bytes[..4] != MAGIC {
        return Err(corrupt(path, "missing AGT1 magic"));
    }
    let dtype = DType::from_code(bytes[4])
        .ok_or_else(|| corrupt(path, format!("unknown dtype code {}", bytes[4])))?;
    let rank = bytes[5] as usize;
    let dims_end = 6 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(corrupt(path, "truncated header"));
    }
    let shape: Vec<usize> = bytes[6..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| corrupt(path, "element count overflows"))?;
    let body = &bytes[dims_end..];
    if body.len() != count * dtype.width() {
        return Err(corrupt(
            path,
            format!(
                "payload has {} bytes, shape {:?} needs {}",
                body.len(),
                shape,
                count * dtype.width()
            ),
        ));
    }
    let wrap = |e: Error| corrupt(path, e.to_string());
    Ok(match dtype {
        DType::F64 => {
            let data = body
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            TensorPayload::Float(Tensor::new(shape, data).map_err(wrap)?)
        }
        DType::F32 => {
            let data = body
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect();
            TensorPayload::Float(Tensor::new(shape, data).map_err(wrap)?)
        }
        DType::U8 => TensorPayload::Labels(LabelTensor::new(shape, body.to_vec()).map_err(wrap)?),
    })
}

pub fn write_tensor_file(path: &Path, payload: &TensorPayload) -> Result<()> {
    let bytes = encode(payload, false)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensor_file(path: &Path) -> Result<TensorPayload> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
