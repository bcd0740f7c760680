//! Named-tensor checkpoint files.
//!
//! Layout (little-endian): magic `RNCK`, `u32` tensor count, `u64` version,
//! then per tensor `u32` name length, UTF-8 name, `u32` rank, `u32` dims,
//! and `f32` data in row-major order.

use std::io::Write;
use std::path::Path;

use ndarray::Array2;

use super::params::ParamSet;
use crate::error::{RainError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RNCK";

pub fn save_checkpoint(params: &ParamSet<f32>, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.num_scalars() * 4);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    buf.extend_from_slice(&params.version.to_le_bytes());
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        for d in t.shape() {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for x in t.iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| RainError::io(dir, e))?;
    }
    // Write to a sibling then rename so a crash never leaves a half file.
    let tmp = path.with_extension("tmp");
    let mut f = std::fs::File::create(&tmp).map_err(|e| RainError::io(&tmp, e))?;
    f.write_all(&buf).map_err(|e| RainError::io(&tmp, e))?;
    f.sync_all().map_err(|e| RainError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| RainError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| RainError::Format("checkpoint truncated".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<ParamSet<f32>> {
    let bytes = std::fs::read(path).map_err(|e| RainError::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        RainError::Format(m) => RainError::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn decode(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(RainError::Format("bad checkpoint magic".into()));
    }
    let count = r.u32()?;
    let mut params = ParamSet::new();
    params.version = r.u64()?;
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| RainError::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let (rows, cols) = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(RainError::Format(format!("tensor {name:?} has unsupported rank {rank}"))),
        };
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| RainError::Format("tensor size overflow".into()))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| RainError::Format("tensor size overflow".into()))?)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let t = Array2::from_shape_vec((rows, cols), data).expect("length checked above");
        params
            .insert(name, t)
            .map_err(|e| RainError::Format(e.to_string()))?;
    }
    if r.pos != bytes.len() {
        return Err(RainError::Format("trailing bytes after last tensor".into()));
    }
    Ok(params)
}
