//! The OVTF tensor file format.
//!
//! Layout: magic `OVTF`, version byte (1), dtype byte (1 = f32 LE, 2 = f64 LE),
//! rank byte, `rank` little-endian u64 extents, then the row-major payload.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::Tensor;

pub const MAGIC: [u8; 4] = *b"OVTF";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum OvtfError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u8),
    #[error("unknown dtype code {0}")]
    DType(u8),
    #[error("rank {0} exceeds 255")]
    Rank(usize),
    #[error("extent overflow in header")]
    Overflow,
}

/// Serializes a tensor. With [`DType::F32`] values are rounded to `f32`.
pub fn write<W: Write>(w: &mut W, t: &Tensor, dtype: DType) -> Result<(), OvtfError> {
    let rank = t.rank();
    if rank > u8::MAX as usize {
        return Err(OvtfError::Rank(rank));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[VERSION, dtype as u8, rank as u8])?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    match dtype {
        DType::F64 => {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        DType::F32 => {
            for v in t.data() {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn read<R: Read>(r: &mut R) -> Result<(Tensor, DType), OvtfError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(OvtfError::Magic(magic));
    }
    let mut head = [0u8; 3];
    r.read_exact(&mut head)?;
    if head[0] != VERSION {
        return Err(OvtfError::Version(head[0]));
    }
    let dtype = DType::from_code(head[1]).ok_or(OvtfError::DType(head[1]))?;
    let rank = head[2] as usize;
    let mut shape = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        let d = usize::try_from(u64::from_le_bytes(b)).map_err(|_| OvtfError::Overflow)?;
        numel = numel.checked_mul(d).ok_or(OvtfError::Overflow)?;
        shape.push(d);
    }
    let mut data = Vec::with_capacity(numel);
    match dtype {
        DType::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
        }
        DType::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
        }
    }
    let t = Tensor::new(shape, data).expect("payload length matches header");
    Ok((t, dtype))
}

pub fn save(path: &Path, t: &Tensor, dtype: DType) -> Result<(), OvtfError> {
    let mut w = BufWriter::new(File::create(path)?);
    write(&mut w, t, dtype)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Tensor, OvtfError> {
    let mut r = BufReader::new(File::open(path)?);
    Ok(read(&mut r)?.0)
}
