//! Portable single-tensor file.
//!
//! ```text
//! magic      16 bytes  "WAVEC2R-TENSOR\0\x01"
//! dtype      u8        1 = u8, 2 = f32, 3 = f64
//! endianness u8        0 = little
//! ndim       u8
//! reserved   u8        0
//! dims       ndim × u64 (little-endian)
//! payload    row-major elements, little-endian
//! ```

use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::raster::{Modality, Raster};

pub const MAGIC: &[u8; 16] = b"WAVEC2R-TENSOR\0\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    U8 = 1,
    F32 = 2,
    F64 = 3,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::U8 => 1,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            1 => Some(Dtype::U8),
            2 => Some(Dtype::F32),
            3 => Some(Dtype::F64),
            _ => None,
        }
    }
}

/// A decoded tensor; values are widened to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl TensorData {
    /// A `(1, H, W)` tensor of a raster.
    pub fn from_raster(r: &Raster, dtype: Dtype) -> Self {
        Self {
            dtype,
            shape: vec![1, r.height(), r.width()],
            values: r.values().to_vec(),
        }
    }

    pub fn to_raster(&self) -> Result<Raster> {
        let (h, w) = match self.shape.as_slice() {
            [h, w] | [1, h, w] | [1, 1, h, w] => (*h, *w),
            s => return Err(Error::Dimension(format!("expected a single 2-D field, got shape {s:?}"))),
        };
        Raster::new(h, w, self.values.clone(), Modality::Vil)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let n: usize = self.shape.iter().product();
        ensure!(n == self.values.len(), Dimension, "shape {:?} holds {n} values, got {}", self.shape, self.values.len());
        ensure!(self.shape.len() <= u8::MAX as usize, Dimension, "too many dimensions");
        let mut buf = Vec::with_capacity(20 + 8 * self.shape.len() + n * self.dtype.size());
        buf.extend(MAGIC);
        buf.extend([self.dtype as u8, 0, self.shape.len() as u8, 0]);
        for &d in &self.shape {
            buf.extend((d as u64).to_le_bytes());
        }
        for &v in &self.values {
            match self.dtype {
                Dtype::U8 => {
                    ensure!(
                        v.fract() == 0.0 && (0.0..=255.0).contains(&v),
                        Validation,
                        "{v} is not representable as u8"
                    );
                    buf.push(v as u8);
                }
                Dtype::F32 => buf.extend((v as f32).to_le_bytes()),
                Dtype::F64 => buf.extend(v.to_le_bytes()),
            }
        }
        Ok(buf)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt {
            id: "<tensor>".into(),
            reason: reason.into(),
        };
        if bytes.len() < 20 || &bytes[..16] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let dtype = Dtype::from_code(bytes[16]).ok_or_else(|| corrupt("unknown dtype"))?;
        if bytes[17] != 0 {
            return Err(corrupt("only little-endian payloads are supported"));
        }
        let ndim = bytes[18] as usize;
        let header = 20 + 8 * ndim;
        if bytes.len() < header {
            return Err(corrupt("truncated header"));
        }
        let shape: Vec<usize> = bytes[20..header]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = shape.iter().product();
        let payload = &bytes[header..];
        if payload.len() != n * dtype.size() {
            return Err(corrupt("payload length does not match shape"));
        }
        let values = match dtype {
            Dtype::U8 => payload.iter().map(|&b| b as f64).collect(),
            Dtype::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        };
        Ok(Self { dtype, shape, values })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_all_dtypes() {
        for (dtype, values) in [
            (Dtype::U8, vec![0.0, 1.0, 255.0, 7.0, 8.0, 9.0]),
            (Dtype::F32, vec![0.5, -1.25, 3.0, 1e-3_f32 as f64, 2.0, 0.0]),
            (Dtype::F64, vec![0.1, 0.2, 0.3, 1.0 / 3.0, -7.0, 1e300]),
        ] {
            let t = TensorData { dtype, shape: vec![1, 2, 3], values };
            let back = TensorData::decode(&t.encode().unwrap()).unwrap();
            assert_eq!(back, t);
            assert_eq!(back.to_raster().unwrap().shape(), (2, 3));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let t = TensorData { dtype: Dtype::F32, shape: vec![2, 2], values: vec![0.0; 4] };
        let bytes = t.encode().unwrap();
        assert!(TensorData::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(TensorData::decode(&bad).is_err());
        let u = TensorData { dtype: Dtype::U8, shape: vec![1], values: vec![0.5] };
        assert!(u.encode().is_err());
        let wrong = TensorData { dtype: Dtype::F64, shape: vec![3], values: vec![0.0; 2] };
        assert!(wrong.encode().is_err());
    }
}
