pub mod collect;
pub mod eval;
pub mod plan;
pub mod render;
pub mod train;
pub mod train_detector;

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpdyn_core::episode::Rollout;
use kpdyn_core::keypoint::{DetectorBackend, DetectorParams};
use kpdyn_core::sim::TaskId;

/// Default keypoint counts per task family.
pub fn default_keypoints(task: TaskId) -> usize {
    if task.is_rope() {
        3
    } else {
        8
    }
}

/// Dataset manifest written next to the episode logs.
#[derive(serde::Serialize, serde::Deserialize)]
pub struct Manifest {
    pub task: TaskId,
    pub episodes: usize,
    pub seed: u64,
    pub policy: String,
    pub config_hash: String,
    pub image_width: usize,
    pub image_height: usize,
    pub files: Vec<String>,
    /// The only timestamp any artifact carries.
    pub created_at: String,
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let bytes = std::fs::read(&path)
        .with_context(|| format!("reading dataset manifest {}", path.display()))?;
    serde_json::from_slice(&bytes).context("parsing manifest")
}

pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Rollout>)> {
    let manifest = read_manifest(dir)?;
    let mut rollouts = Vec::with_capacity(manifest.files.len());
    for file in &manifest.files {
        rollouts.push(kpdyn_core::episode::load(&dir.join(file))?);
    }
    Ok((manifest, rollouts))
}

/// Refuse cross-configuration mixing unless forced.
pub fn check_hash(expected: &str, found: &str, what: &str, force: bool) -> Result<()> {
    if expected != found {
        if force {
            eprintln!(
                "warning: {what} config hash {found} does not match {expected}; --force given"
            );
            return Ok(());
        }
        bail!(
            "{what} was produced under config hash {found}, current run is {expected}; \
             pass --force to mix configurations"
        );
    }
    Ok(())
}

/// Detector selection shared by train/eval/plan/render: "geometric" or a
/// checkpoint path.
pub fn load_detector(spec: &str, keypoints: usize) -> Result<DetectorBackend> {
    if spec == "geometric" {
        return Ok(DetectorBackend::geometric());
    }
    let path = PathBuf::from(spec);
    let (store, meta) = kpdyn_core::autodiff::checkpoint::load(&path)
        .with_context(|| format!("loading detector checkpoint {}", path.display()))?;
    if meta["namespace"] != "detector" {
        bail!(
            "{} is not a detector checkpoint (namespace {})",
            path.display(),
            meta["namespace"]
        );
    }
    let k = meta["keypoints"].as_u64().context("detector metadata")? as usize;
    if k != keypoints {
        bail!("detector was trained for {k} keypoints, this run uses {keypoints}");
    }
    let feat_channels = meta["feat_channels"].as_u64().context("detector metadata")? as usize;
    Ok(DetectorBackend::Learned(DetectorParams {
        store,
        k,
        feat_channels,
    }))
}

pub fn now_rfc3339() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    // Days-from-epoch to civil date (Howard Hinnant's algorithm).
    let days = secs / 86_400;
    let rem = secs % 86_400;
    let z = days as i64 + 719_468;
    let era = z.div_euclid(146_097);
    let doe = z.rem_euclid(146_097);
    let yoe = (doe - doe / 1460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = doy - (153 * mp + 2) / 5 + 1;
    let m = if mp < 10 { mp + 3 } else { mp - 9 };
    let y = if m <= 2 { y + 1 } else { y };
    format!(
        "{:04}-{:02}-{:02}T{:02}:{:02}:{:02}Z",
        y,
        m,
        d,
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}
