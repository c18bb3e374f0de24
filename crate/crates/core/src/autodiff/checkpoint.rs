//! Checkpoint container: a small self-describing binary file holding named
//! parameter tensors plus a JSON metadata blob.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"KPCK"
//! u32    format version (currently 1)
//! u32    metadata length, followed by that many bytes of JSON
//! u32    parameter count
//! per parameter, in lexicographic path order:
//!   u32  path length, path bytes (UTF-8)
//!   u8   dtype tag (0 = f32)
//!   u32  rank, then u32 per dimension
//!   f32  raw values, row-major
//! ```
//!
//! Round-trips are bit-exact; floats are stored as their raw IEEE-754 bits.
//! Optimizer moments are not part of the container.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::params::ParamStore;
use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"KPCK";
pub const FORMAT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("unsupported checkpoint format version {0}")]
    BadVersion(u32),
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("metadata is not valid JSON: {0}")]
    BadMetadata(#[from] serde_json::Error),
    #[error("truncated checkpoint file")]
    Truncated,
    #[error("invalid parameter table: {0}")]
    BadParams(String),
}

/// Serialize a store and its metadata to bytes.
pub fn to_bytes(store: &ParamStore, meta: &serde_json::Value) -> Vec<u8> {
    let meta_bytes = serde_json::to_vec(meta).expect("JSON value serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (path, tensor) in store.iter() {
        out.extend_from_slice(&(path.len() as u32).to_le_bytes());
        out.extend_from_slice(path.as_bytes());
        out.push(DTYPE_F32);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
    Ok(u32::from_le_bytes(buf))
}

/// Parse checkpoint bytes back into a store and its metadata.
pub fn from_bytes(bytes: &[u8]) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| CheckpointError::Truncated)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = read_u32(&mut cur)?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::BadVersion(version));
    }
    let meta_len = read_u32(&mut cur)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    cur.read_exact(&mut meta_bytes).map_err(|_| CheckpointError::Truncated)?;
    let meta: serde_json::Value = serde_json::from_slice(&meta_bytes)?;

    let count = read_u32(&mut cur)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let path_len = read_u32(&mut cur)? as usize;
        let mut path_bytes = vec![0u8; path_len];
        cur.read_exact(&mut path_bytes).map_err(|_| CheckpointError::Truncated)?;
        let path = String::from_utf8(path_bytes)
            .map_err(|e| CheckpointError::BadParams(e.to_string()))?;
        let mut dtype = [0u8; 1];
        cur.read_exact(&mut dtype).map_err(|_| CheckpointError::Truncated)?;
        if dtype[0] != DTYPE_F32 {
            return Err(CheckpointError::BadDtype(dtype[0]));
        }
        let rank = read_u32(&mut cur)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut cur)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f32; numel];
        for v in &mut data {
            let mut buf = [0u8; 4];
            cur.read_exact(&mut buf).map_err(|_| CheckpointError::Truncated)?;
            *v = f32::from_le_bytes(buf);
        }
        store
            .insert(&path, Tensor::new(shape, data))
            .map_err(|e| CheckpointError::BadParams(e.to_string()))?;
    }
    Ok((store, meta))
}

/// Write a checkpoint atomically (temp file in the same directory + rename).
pub fn save(
    path: &Path,
    store: &ParamStore,
    meta: &serde_json::Value,
) -> Result<(), CheckpointError> {
    let bytes = to_bytes(store, meta);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value), CheckpointError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
