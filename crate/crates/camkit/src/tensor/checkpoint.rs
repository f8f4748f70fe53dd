//! Flat binary parameter container.
//!
//! Layout: magic `CAMK`, version u32, entry count u32, then per entry:
//! name length u16, UTF-8 name, dtype u8 (0 = f32, 1 = f64), rank u8,
//! extents u32[rank], raw little-endian payload. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CAMK";
const CHECKPOINT_VERSION: u32 = 1;

/// One named tensor in a checkpoint. Values are stored as f64 in memory and
/// converted to the entry's on-disk dtype on write.
#[derive(Clone, Debug)]
pub struct CheckpointEntry {
    pub name: String,
    pub dtype: u8,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl CheckpointEntry {
    pub fn from_tensor<T: Scalar>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        CheckpointEntry {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            values: t.data().iter().map(|v| v.to_f64()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        Tensor::new(
            self.shape.clone(),
            self.values.iter().map(|&v| T::from_f64(v)).collect(),
        )
    }
}

pub fn write_checkpoint(path: &Path, entries: &[CheckpointEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for e in entries {
        let name = e.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(Error::format(format!("checkpoint name too long: {}", e.name)));
        }
        w.write_all(&(name.len() as u16).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[e.dtype, e.shape.len() as u8])?;
        for &ext in &e.shape {
            w.write_all(&(ext as u32).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(e.values.len() * 8);
        match e.dtype {
            0 => {
                for &v in &e.values {
                    Scalar::to_le_bytes(v as f32, &mut payload);
                }
            }
            1 => {
                for &v in &e.values {
                    Scalar::to_le_bytes(v, &mut payload);
                }
            }
            d => return Err(Error::format(format!("unknown dtype {d}"))),
        }
        w.write_all(&payload)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<CheckpointEntry>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::format(format!(
            "bad checkpoint magic {magic:?}, expected {CHECKPOINT_MAGIC:?}"
        )));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint entry name is not UTF-8"))?;
        let mut head = [0u8; 2];
        r.read_exact(&mut head)?;
        let (dtype, rank) = (head[0], head[1] as usize);
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let numel: usize = shape.iter().product();
        let width = match dtype {
            0 => 4,
            1 => 8,
            d => return Err(Error::format(format!("unknown dtype {d} for {name}"))),
        };
        let mut payload = vec![0u8; numel * width];
        r.read_exact(&mut payload)?;
        let values: Vec<f64> = payload
            .chunks_exact(width)
            .map(|c| {
                if dtype == 0 {
                    f32::from_le_slice(c) as f64
                } else {
                    f64::from_le_slice(c)
                }
            })
            .collect();
        entries.push(CheckpointEntry {
            name,
            dtype,
            shape,
            values,
        });
    }
    Ok(entries)
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut buf = [0u8; 2];
    r.read_exact(&mut buf)?;
    Ok(u16::from_le_bytes(buf))
}
