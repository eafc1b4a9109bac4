//! Minimal binary tensor container, bit-exact across round trips.
//!
//! Byte layout (little-endian):
//! magic `JPPT` | version u16 | dtype u8 (0 = f32, 1 = u32) | rank u8 |
//! dims rank x u32 | payload, row-major.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"JPPT";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("payload truncated: expected {expected} bytes, found {found}")]
    TruncatedPayload { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32 { dims: Vec<u32>, data: Vec<f32> },
    U32 { dims: Vec<u32>, data: Vec<u32> },
}

impl Tensor {
    pub fn dims(&self) -> &[u32] {
        match self {
            Tensor::F32 { dims, .. } | Tensor::U32 { dims, .. } => dims,
        }
    }

    pub fn element_count(&self) -> usize {
        self.dims().iter().map(|&d| d as usize).product()
    }
}

pub fn write_tensor_to(mut w: impl Write, tensor: &Tensor) -> Result<(), TensorError> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let (dtype, dims): (u8, &[u32]) = match tensor {
        Tensor::F32 { dims, .. } => (0, dims),
        Tensor::U32 { dims, .. } => (1, dims),
    };
    w.write_all(&[dtype, dims.len() as u8])?;
    for &d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    match tensor {
        Tensor::F32 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Tensor::U32 { data, .. } => {
            for v in data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read_tensor_from(mut r: impl Read) -> Result<Tensor, TensorError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(TensorError::BadMagic(magic));
    }
    let mut buf2 = [0u8; 2];
    r.read_exact(&mut buf2)?;
    let version = u16::from_le_bytes(buf2);
    if version != VERSION {
        return Err(TensorError::UnsupportedVersion(version));
    }
    r.read_exact(&mut buf2)?;
    let (dtype, rank) = (buf2[0], buf2[1] as usize);
    let mut dims = Vec::with_capacity(rank);
    let mut buf4 = [0u8; 4];
    for _ in 0..rank {
        r.read_exact(&mut buf4)?;
        dims.push(u32::from_le_bytes(buf4));
    }
    let count: usize = dims.iter().map(|&d| d as usize).product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != count * 4 {
        return Err(TensorError::TruncatedPayload { expected: count * 4, found: payload.len() });
    }
    let words = payload.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
    match dtype {
        0 => Ok(Tensor::F32 { dims, data: words.map(f32::from_le_bytes).collect() }),
        1 => Ok(Tensor::U32 { dims, data: words.map(u32::from_le_bytes).collect() }),
        other => Err(TensorError::UnknownDtype(other)),
    }
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<(), TensorError> {
    let file = std::fs::File::create(path)?;
    write_tensor_to(std::io::BufWriter::new(file), tensor)
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor, TensorError> {
    let file = std::fs::File::open(path)?;
    read_tensor_from(std::io::BufReader::new(file))
}
