//! Binary checkpoint format: a small header (config hash, training step)
//! followed by named f32 parameter blobs with shapes.
//!
//! Layout (little-endian): `SPCK` magic, u32 version, u16 config-hash length
//! + UTF-8 hash, u64 step, u32 entry count, then per entry: u16 name length
//! + UTF-8 name, u8 rank, u32 dims, f32 data. A trailing u64 holds the total
//! f32 count as a cheap integrity check.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

const MAGIC: &[u8; 4] = b"SPCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// One named parameter: (name, shape, values).
pub type NamedBlob = (String, Vec<usize>, Vec<f32>);

/// Everything a checkpoint stores.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Hash of the training config that produced the weights.
    pub config_hash: String,
    /// Global training step at save time.
    pub step: u64,
    pub blobs: Vec<NamedBlob>,
}

pub fn write_checkpoint<W: Write>(mut w: W, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let hash = ckpt.config_hash.as_bytes();
    w.write_all(&(hash.len() as u16).to_le_bytes())?;
    w.write_all(hash)?;
    w.write_all(&ckpt.step.to_le_bytes())?;
    w.write_all(&(ckpt.blobs.len() as u32).to_le_bytes())?;
    let mut total: u64 = 0;
    for (name, shape, values) in &ckpt.blobs {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(CheckpointError::Corrupt(format!(
                "blob {name}: shape {shape:?} does not match {} values",
                values.len()
            )));
        }
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in values {
            w.write_all(&v.to_le_bytes())?;
        }
        total += values.len() as u64;
    }
    w.write_all(&total.to_le_bytes())?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint, CheckpointError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let hash_len = read_u16(&mut r)? as usize;
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)?;
    let config_hash = String::from_utf8(hash)
        .map_err(|_| CheckpointError::Corrupt("config hash is not UTF-8".into()))?;
    let mut step_bytes = [0u8; 8];
    r.read_exact(&mut step_bytes)?;
    let step = u64::from_le_bytes(step_bytes);
    let count = read_u32(&mut r)? as usize;
    let mut blobs = Vec::with_capacity(count);
    let mut total: u64 = 0;
    for _ in 0..count {
        let name_len = read_u16(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| CheckpointError::Corrupt("parameter name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut buf = vec![0u8; n * 4];
        r.read_exact(&mut buf)
            .map_err(|_| CheckpointError::Corrupt(format!("blob {name} is truncated")))?;
        let values: Vec<f32> = buf
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        total += values.len() as u64;
        blobs.push((name, shape, values));
    }
    let mut trailer = [0u8; 8];
    r.read_exact(&mut trailer)
        .map_err(|_| CheckpointError::Corrupt("missing trailer".into()))?;
    let expect = u64::from_le_bytes(trailer);
    if expect != total {
        return Err(CheckpointError::Corrupt(format!(
            "trailer records {expect} values, file holds {total}"
        )));
    }
    Ok(Checkpoint { config_hash, step, blobs })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, ckpt)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

fn read_u16<R: Read>(r: &mut R) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
