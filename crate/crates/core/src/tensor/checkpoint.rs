//! Binary checkpoint format for named f32 tensors.
//!
//! Layout (all integers little-endian):
//! magic "NAVCKPT1" | u32 tensor count | per tensor:
//! u32 name length, name bytes (utf-8), u32 rank, u64 dims, f32 data.
//!
//! Loading validates the full structure; a checkpoint loaded into an
//! architecture with different parameter names or shapes is rejected rather
//! than silently reinterpreted.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::data::TensorData;
use super::params::ParamSet;

const MAGIC: &[u8; 8] = b"NAVCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match the expected parameters: {0}")]
    Mismatch(String),
}

pub fn save_checkpoint(path: &Path, params: &ParamSet<f32>) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params.iter() {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N], CheckpointError> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    Ok(u32::from_le_bytes(read_exact::<4>(r)?))
}

/// Load a checkpoint without an expected shape (e.g. to inspect it).
pub fn load_checkpoint_raw(path: &Path) -> Result<ParamSet<f32>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_exact::<8>(&mut r)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u32(&mut r)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        if name_len > 4096 {
            return Err(CheckpointError::Corrupt(format!("name length {name_len}")));
        }
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf)
            .map_err(|e| CheckpointError::Corrupt(format!("name not utf-8: {e}")))?;
        let rank = read_u32(&mut r)? as usize;
        if rank > 8 {
            return Err(CheckpointError::Corrupt(format!("rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut len = 1usize;
        for _ in 0..rank {
            let d = u64::from_le_bytes(read_exact::<8>(&mut r)?) as usize;
            len = len
                .checked_mul(d)
                .filter(|&l| l <= (1 << 31))
                .ok_or_else(|| CheckpointError::Corrupt(format!("dims overflow in {name:?}")))?;
            shape.push(d);
        }
        let mut data = vec![0f32; len];
        for v in data.iter_mut() {
            *v = f32::from_le_bytes(read_exact::<4>(&mut r)?);
        }
        params
            .insert(name, TensorData::new(shape, data))
            .map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(CheckpointError::Corrupt("trailing bytes after last tensor".into()));
    }
    Ok(params)
}

/// Load a checkpoint and validate it against `expected` names and shapes.
pub fn load_checkpoint(path: &Path, expected: &ParamSet<f32>) -> Result<ParamSet<f32>, CheckpointError> {
    let got = load_checkpoint_raw(path)?;
    if got.len() != expected.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} tensors on disk, {} expected",
            got.len(),
            expected.len()
        )));
    }
    for ((gname, gt), (ename, et)) in got.iter().zip(expected.iter()) {
        if gname != ename {
            return Err(CheckpointError::Mismatch(format!(
                "tensor {gname:?} where {ename:?} expected"
            )));
        }
        if gt.shape() != et.shape() {
            return Err(CheckpointError::Mismatch(format!(
                "{gname:?}: shape {:?} on disk, {:?} expected",
                gt.shape(),
                et.shape()
            )));
        }
    }
    Ok(got)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamSet<f32> {
        let mut p = ParamSet::new();
        p.insert("conv1.w", TensorData::from_f64_slice(&[2, 1, 2, 2], &[1., -2., 3., 4., 0.5, 0.25, -0.125, 8.])).unwrap();
        p.insert("conv1.b", TensorData::from_f64_slice(&[2], &[0.0, -1.0])).unwrap();
        p
    }

    #[test]
    fn roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        let p = sample();
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path, &p).unwrap();
        assert!(p.bit_eq(&q));
    }

    #[test]
    fn wrong_shape_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut other = ParamSet::new();
        other.insert("conv1.w", TensorData::<f32>::zeros(&[2, 1, 2, 2])).unwrap();
        other.insert("conv1.b", TensorData::<f32>::zeros(&[3])).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &other),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn wrong_name_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&path, &sample()).unwrap();
        let mut other = ParamSet::new();
        other.insert("conv9.w", TensorData::<f32>::zeros(&[2, 1, 2, 2])).unwrap();
        other.insert("conv1.b", TensorData::<f32>::zeros(&[2])).unwrap();
        assert!(matches!(
            load_checkpoint(&path, &other),
            Err(CheckpointError::Mismatch(_))
        ));
    }

    #[test]
    fn garbage_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(matches!(
            load_checkpoint_raw(&path),
            Err(CheckpointError::BadMagic)
        ));
    }
}
