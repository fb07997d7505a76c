//! TPRV: a little-endian binary container for dense real tensors.
//!
//! ```text
//! offset  size      field
//! 0       4         magic  b"TPRV"
//! 4       1         version (1)
//! 5       1         dtype   (0 = f32, 1 = f64)
//! 6       1         ndim
//! 7       1         reserved (0)
//! 8       4*ndim    dimensions, u32 each
//! ...     n*width   payload, row-major
//! ```
//!
//! Readers reject unknown versions and dtypes, nonzero reserved bytes, short
//! or over-long payloads, and non-finite values.

use std::fs;
use std::io;
use std::path::Path;

use crate::tensor::Matrix2D;

pub const MAGIC: [u8; 4] = *b"TPRV";
pub const VERSION: u8 = 1;
/// Bytes before the dimension table.
pub const PREAMBLE_LEN: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum TprvError {
    #[error("bad magic {0:?}, expected \"TPRV\"")]
    BadMagic([u8; 4]),
    #[error("unsupported TPRV version {0}")]
    UnsupportedVersion(u8),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("reserved header byte is {0}, expected 0")]
    BadReserved(u8),
    #[error("truncated: needed {needed} bytes, found {found}")]
    Truncated { needed: usize, found: usize },
    #[error("{0} unexpected trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("dimensions overflow the addressable size")]
    DimensionOverflow,
    #[error("dimensions hold {expected} elements but {found} values were given")]
    LengthMismatch { expected: usize, found: usize },
    #[error("expected a rank-{expected} tensor, found rank {found}")]
    RankMismatch { expected: usize, found: usize },
    #[error("non-finite value at element {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Dtype {
    F32,
    #[default]
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Result<Self, TprvError> {
        match code {
            0 => Ok(Dtype::F32),
            1 => Ok(Dtype::F64),
            other => Err(TprvError::UnsupportedDtype(other)),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

/// A decoded tensor of any rank. Values are widened to `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// Size in bytes of an encoded tensor.
pub fn encoded_len(dims: &[usize], dtype: Dtype) -> Option<usize> {
    let count = dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))?;
    count
        .checked_mul(dtype.width())?
        .checked_add(PREAMBLE_LEN + 4 * dims.len())
}

pub fn encode(dims: &[usize], data: &[f64], dtype: Dtype) -> Result<Vec<u8>, TprvError> {
    let ndim = u8::try_from(dims.len()).map_err(|_| TprvError::DimensionOverflow)?;
    let len = encoded_len(dims, dtype).ok_or(TprvError::DimensionOverflow)?;
    let count: usize = dims.iter().product();
    if count != data.len() {
        return Err(TprvError::LengthMismatch {
            expected: count,
            found: data.len(),
        });
    }
    let mut out = Vec::with_capacity(len);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&[VERSION, dtype.code(), ndim, 0]);
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| TprvError::DimensionOverflow)?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        Dtype::F32 => data
            .iter()
            .for_each(|&x| out.extend_from_slice(&(x as f32).to_le_bytes())),
        Dtype::F64 => data
            .iter()
            .for_each(|&x| out.extend_from_slice(&x.to_le_bytes())),
    }
    Ok(out)
}

fn need(bytes: &[u8], needed: usize) -> Result<(), TprvError> {
    if bytes.len() < needed {
        Err(TprvError::Truncated {
            needed,
            found: bytes.len(),
        })
    } else {
        Ok(())
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor, TprvError> {
    need(bytes, PREAMBLE_LEN)?;
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(TprvError::BadMagic(magic));
    }
    if bytes[4] != VERSION {
        return Err(TprvError::UnsupportedVersion(bytes[4]));
    }
    let dtype = Dtype::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    if bytes[7] != 0 {
        return Err(TprvError::BadReserved(bytes[7]));
    }
    let header_len = PREAMBLE_LEN + 4 * ndim;
    need(bytes, header_len)?;
    let dims: Vec<usize> = bytes[PREAMBLE_LEN..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let total = encoded_len(&dims, dtype).ok_or(TprvError::DimensionOverflow)?;
    need(bytes, total)?;
    if bytes.len() > total {
        return Err(TprvError::TrailingBytes(bytes.len() - total));
    }
    let payload = &bytes[header_len..total];
    let data: Vec<f64> = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    if let Some(i) = data.iter().position(|x| !x.is_finite()) {
        return Err(TprvError::NonFinite(i));
    }
    Ok(Tensor { dtype, dims, data })
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TprvError> {
    decode(&fs::read(path)?)
}

pub fn write_tensor(
    path: impl AsRef<Path>,
    dims: &[usize],
    data: &[f64],
    dtype: Dtype,
) -> Result<(), TprvError> {
    fs::write(path, encode(dims, data, dtype)?)?;
    Ok(())
}

pub fn matrix_from_file(path: impl AsRef<Path>) -> Result<Matrix2D, TprvError> {
    let t = read_tensor(path)?;
    if t.dims.len() != 2 {
        return Err(TprvError::RankMismatch {
            expected: 2,
            found: t.dims.len(),
        });
    }
    Ok(Matrix2D::from_vec(t.dims[0], t.dims[1], t.data).expect("length and finiteness checked"))
}

/// Writes `m` as 64-bit floats.
pub fn matrix_to_file(m: &Matrix2D, path: impl AsRef<Path>) -> Result<(), TprvError> {
    matrix_to_file_as(m, path, Dtype::F64)
}

pub fn matrix_to_file_as(
    m: &Matrix2D,
    path: impl AsRef<Path>,
    dtype: Dtype,
) -> Result<(), TprvError> {
    write_tensor(path, &[m.rows(), m.cols()], m.as_slice(), dtype)
}

pub fn vector_from_file(path: impl AsRef<Path>) -> Result<Vec<f64>, TprvError> {
    let t = read_tensor(path)?;
    if t.dims.len() != 1 {
        return Err(TprvError::RankMismatch {
            expected: 1,
            found: t.dims.len(),
        });
    }
    Ok(t.data)
}

pub fn vector_to_file(v: &[f64], path: impl AsRef<Path>, dtype: Dtype) -> Result<(), TprvError> {
    write_tensor(path, &[v.len()], v, dtype)
}
