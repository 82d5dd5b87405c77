//! AMTN v1 tensor files: `AMTN`, version byte 0x01, four little-endian
//! `u32` dims (N, C, H, W), then the payload as little-endian `f32` in
//! row-major order.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use amam_core::{Shape, Tensor};

pub const MAGIC: &[u8; 4] = b"AMTN";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 4 + 1 + 4 * 4;

#[derive(Debug, thiserror::Error)]
pub enum AmtnError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: bad magic bytes \"{}\", expected \"AMTN\"", .found.escape_ascii())]
    BadMagic { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported version {found:#04x}")]
    BadVersion { path: PathBuf, found: u8 },
    #[error("{path}: truncated header ({found} of {HEADER_LEN} bytes)")]
    TruncatedHeader { path: PathBuf, found: usize },
    #[error("{path}: payload holds {found} bytes, dims {shape} need {expected}")]
    PayloadLength {
        path: PathBuf,
        shape: Shape,
        expected: usize,
        found: usize,
    },
    #[error("{path}: zero-sized dimension in {shape}")]
    EmptyDim { path: PathBuf, shape: Shape },
    #[error("{path}: dimension {dim} does not fit in u32")]
    DimOverflow { path: PathBuf, dim: usize },
}

impl AmtnError {
    pub fn path(&self) -> &Path {
        match self {
            AmtnError::Io { path, .. }
            | AmtnError::BadMagic { path, .. }
            | AmtnError::BadVersion { path, .. }
            | AmtnError::TruncatedHeader { path, .. }
            | AmtnError::PayloadLength { path, .. }
            | AmtnError::EmptyDim { path, .. }
            | AmtnError::DimOverflow { path, .. } => path,
        }
    }
}

/// Serializes `t`, narrowing every element to `f32`.
pub fn encode(t: &Tensor, path: &Path) -> Result<Vec<u8>, AmtnError> {
    let s = t.shape();
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    for dim in s.dims() {
        let d = u32::try_from(dim).map_err(|_| AmtnError::DimOverflow {
            path: path.to_path_buf(),
            dim,
        })?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Parses an AMTN byte buffer; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Tensor, AmtnError> {
    let path_buf = || path.to_path_buf();
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        let mut found = [0u8; 4];
        let n = bytes.len().min(4);
        found[..n].copy_from_slice(&bytes[..n]);
        if bytes.len() < 4 && MAGIC.starts_with(&bytes[..n]) {
            return Err(AmtnError::TruncatedHeader {
                path: path_buf(),
                found: bytes.len(),
            });
        }
        return Err(AmtnError::BadMagic {
            path: path_buf(),
            found,
        });
    }
    if bytes.len() < HEADER_LEN {
        if bytes.len() > 4 && bytes[4] != VERSION {
            return Err(AmtnError::BadVersion {
                path: path_buf(),
                found: bytes[4],
            });
        }
        return Err(AmtnError::TruncatedHeader {
            path: path_buf(),
            found: bytes.len(),
        });
    }
    if bytes[4] != VERSION {
        return Err(AmtnError::BadVersion {
            path: path_buf(),
            found: bytes[4],
        });
    }
    let dim = |i: usize| {
        let at = 5 + 4 * i;
        u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4-byte slice")) as usize
    };
    let shape = Shape::new(dim(0), dim(1), dim(2), dim(3));
    if shape.dims().contains(&0) {
        return Err(AmtnError::EmptyDim {
            path: path_buf(),
            shape,
        });
    }
    let payload = &bytes[HEADER_LEN..];
    let expected = shape
        .dims()
        .iter()
        .try_fold(4usize, |acc, &d| acc.checked_mul(d))
        .unwrap_or(usize::MAX);
    if payload.len() != expected {
        return Err(AmtnError::PayloadLength {
            path: path_buf(),
            shape,
            expected,
            found: payload.len(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
        .collect();
    Ok(Tensor::from_vec(shape, data).expect("payload length checked against shape"))
}

pub fn write(t: &Tensor, path: &Path) -> Result<(), AmtnError> {
    let bytes = encode(t, path)?;
    let io_err = |source| AmtnError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = fs::File::create(path).map_err(io_err)?;
    f.write_all(&bytes).map_err(io_err)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor, AmtnError> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| AmtnError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    decode(&bytes, path)
}
