//! Episode rollouts and their binary log format.
//!
//! A rollout stores one record per visited state: the depth observation,
//! the action executed *from* that state, and the ground-truth reward and
//! success flag *of* that state. The terminal record carries a zero action
//! placeholder that is never executed, so a rollout with `T` actions has
//! `T + 1` records and `frames[t].action` produces `frames[t + 1].image`.
//!
//! On disk (all integers little-endian):
//!
//! ```text
//! magic  b"KPEP"
//! u32    format version (currently 1)
//! u32    header length, followed by that many bytes of JSON
//!        {"task", "seed", "config_hash", "image_width", "image_height", "records"}
//! per record:
//!   u32  width, u32 height
//!   f32  pixels (width * height, row-major)
//!   f32  action (xs, ys, xg, yg)
//!   f32  reward
//!   u8   success
//! ```
//!
//! Logs contain no timestamps, so identical runs produce identical bytes.

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::sim::{Action, DepthImage, SimConfig, TaskId};

const MAGIC: &[u8; 4] = b"KPEP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LogError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes (not an episode log)")]
    BadMagic,
    #[error("unsupported episode log version {0}")]
    BadVersion(u32),
    #[error("corrupt header: {0}")]
    BadHeader(#[from] serde_json::Error),
    #[error("truncated episode log")]
    Truncated,
    #[error("corrupt episode log: {0}")]
    Corrupt(String),
}

/// One visited state: observation, the action taken from it, and the
/// ground-truth labels of the state itself.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub image: DepthImage,
    pub action: Action,
    pub reward: f32,
    pub success: bool,
}

/// A recorded episode.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub task: TaskId,
    pub seed: u64,
    pub config_hash: String,
    pub frames: Vec<StepRecord>,
}

impl Rollout {
    /// Number of executed actions (one fewer than stored records).
    pub fn steps(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    /// `(state record, action, next state record)` triples in time order.
    pub fn transitions(&self) -> impl Iterator<Item = (&StepRecord, Action, &StepRecord)> {
        self.frames
            .windows(2)
            .map(|w| (&w[0], w[0].action, &w[1]))
    }

    pub fn best_reward(&self) -> f32 {
        self.frames
            .iter()
            .map(|f| f.reward)
            .fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn any_success(&self) -> bool {
        self.frames.iter().any(|f| f.success)
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    task: TaskId,
    seed: u64,
    config_hash: String,
    image_width: usize,
    image_height: usize,
    records: usize,
}

/// Stable short hash of the simulator/observation configuration. Artifacts
/// produced under different configurations refuse to mix.
pub fn config_hash(cfg: &SimConfig, task: TaskId, image_width: usize, image_height: usize) -> String {
    #[derive(Serialize)]
    struct Signature<'a> {
        sim: &'a SimConfig,
        task: TaskId,
        image_width: usize,
        image_height: usize,
    }
    let json = serde_json::to_string(&Signature {
        sim: cfg,
        task,
        image_width,
        image_height,
    })
    .expect("config serializes");
    let digest = Sha256::digest(json.as_bytes());
    digest
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn to_bytes(rollout: &Rollout) -> Vec<u8> {
    let (w, h) = rollout
        .frames
        .first()
        .map_or((0, 0), |f| (f.image.width, f.image.height));
    let header = serde_json::to_vec(&Header {
        task: rollout.task,
        seed: rollout.seed,
        config_hash: rollout.config_hash.clone(),
        image_width: w,
        image_height: h,
        records: rollout.frames.len(),
    })
    .expect("header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for frame in &rollout.frames {
        out.extend_from_slice(&(frame.image.width as u32).to_le_bytes());
        out.extend_from_slice(&(frame.image.height as u32).to_le_bytes());
        for &px in &frame.image.pixels {
            out.extend_from_slice(&px.to_le_bytes());
        }
        for v in frame.action.to_array() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&frame.reward.to_le_bytes());
        out.push(u8::from(frame.success));
    }
    out
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> Result<u32, LogError> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf).map_err(|_| LogError::Truncated)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_f32(cur: &mut Cursor<&[u8]>) -> Result<f32, LogError> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf).map_err(|_| LogError::Truncated)?;
    Ok(f32::from_le_bytes(buf))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Rollout, LogError> {
    let mut cur = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    cur.read_exact(&mut magic).map_err(|_| LogError::Truncated)?;
    if &magic != MAGIC {
        return Err(LogError::BadMagic);
    }
    let version = read_u32(&mut cur)?;
    if version != FORMAT_VERSION {
        return Err(LogError::BadVersion(version));
    }
    let header_len = read_u32(&mut cur)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    cur.read_exact(&mut header_bytes)
        .map_err(|_| LogError::Truncated)?;
    let header: Header = serde_json::from_slice(&header_bytes)?;

    let mut frames = Vec::with_capacity(header.records);
    for k in 0..header.records {
        let w = read_u32(&mut cur)? as usize;
        let h = read_u32(&mut cur)? as usize;
        if w != header.image_width || h != header.image_height {
            return Err(LogError::Corrupt(format!(
                "record {k}: dims {w}x{h} disagree with header {}x{}",
                header.image_width, header.image_height
            )));
        }
        let mut pixels = vec![0.0f32; w * h];
        for px in &mut pixels {
            *px = read_f32(&mut cur)?;
        }
        let action = Action::new(
            read_f32(&mut cur)?,
            read_f32(&mut cur)?,
            read_f32(&mut cur)?,
            read_f32(&mut cur)?,
        );
        let reward = read_f32(&mut cur)?;
        let mut flag = [0u8; 1];
        cur.read_exact(&mut flag).map_err(|_| LogError::Truncated)?;
        frames.push(StepRecord {
            image: DepthImage {
                width: w,
                height: h,
                pixels,
            },
            action,
            reward,
            success: flag[0] != 0,
        });
    }
    Ok(Rollout {
        task: header.task,
        seed: header.seed,
        config_hash: header.config_hash,
        frames,
    })
}

/// Write a log atomically (temp file in the same directory + rename).
pub fn save(path: &Path, rollout: &Rollout) -> Result<(), LogError> {
    let bytes = to_bytes(rollout);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Rollout, LogError> {
    let bytes = fs::read(path)?;
    from_bytes(&bytes)
}
