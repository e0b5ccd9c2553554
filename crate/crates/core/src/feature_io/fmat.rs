//! FMAT: `b"FMAT"`, u32 version, u32 rows, u32 cols, then `rows * cols`
//! f32 values in row-major order. All integers and floats little-endian.

use std::fs;
use std::path::Path;

use crate::autodiff::{Array, Real};
use crate::error::{Error, Result};

pub const FMAT_MAGIC: [u8; 4] = *b"FMAT";
pub const FMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 16;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic: expected \"FMAT\"")]
    BadMagic,
    #[error("unsupported FMAT version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("trailing bytes after payload: {0}")]
    TrailingBytes(usize),
    #[error("zero extent: {rows}x{cols}")]
    ZeroExtent { rows: usize, cols: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

/// A `rows × cols` real matrix stored at 32-bit precision. Rows index time.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(FormatError::ZeroExtent { rows, cols }.into());
        }
        if values.len() != rows * cols {
            return Err(Error::shape(
                "feature matrix",
                format!("{rows}x{cols} needs {} values, got {}", rows * cols, values.len()),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FormatError::NonFinite(i).into());
        }
        Ok(Self { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_array<F: Real>(a: &Array<F>) -> Result<Self> {
        let (r, c) = a.dims2()?;
        Self::new(r, c, a.data().iter().map(|v| v.as_f64() as f32).collect())
    }

    pub fn to_array<F: Real>(&self) -> Array<F> {
        Array::new(
            &[self.rows, self.cols],
            self.values.iter().map(|&v| F::of(f64::from(v))).collect(),
        )
        .expect("validated extents")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols + c]
    }
}

pub fn encode_feature_matrix(m: &FeatureMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * m.values.len());
    out.extend_from_slice(&FMAT_MAGIC);
    out.extend_from_slice(&FMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(m.rows as u32).to_le_bytes());
    out.extend_from_slice(&(m.cols as u32).to_le_bytes());
    for v in &m.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_feature_matrix(bytes: &[u8]) -> Result<FeatureMatrix, FormatError> {
    if bytes.len() < 4 || bytes[..4] != FMAT_MAGIC {
        return Err(FormatError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(FormatError::Truncated {
            expected: HEADER_LEN,
            found: bytes.len(),
        });
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FMAT_VERSION {
        return Err(FormatError::UnsupportedVersion(version));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    if rows == 0 || cols == 0 {
        return Err(FormatError::ZeroExtent { rows, cols });
    }
    let expected = HEADER_LEN + 4 * rows * cols;
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    if bytes.len() > expected {
        return Err(FormatError::TrailingBytes(bytes.len() - expected));
    }
    let values: Vec<f32> = bytes[HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(FormatError::NonFinite(i));
    }
    Ok(FeatureMatrix { rows, cols, values })
}

pub fn write_feature_matrix(path: impl AsRef<Path>, m: &FeatureMatrix) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_feature_matrix(m)).map_err(|e| Error::io(path, e))
}

pub fn read_feature_matrix(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_feature_matrix(&bytes)?)
}
