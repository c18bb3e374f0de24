//! Run configuration: defaults, overridden by a key=value config file,
//! overridden by command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kpdyn_core::sim::SimConfig;

/// Environment variable consulted for the output root when `--out` is absent.
pub const OUT_ENV: &str = "KPDYN_OUT";

/// Flat `key = value` file; `#` starts a comment. Keys prefixed `sim.`
/// override simulator fields, e.g. `sim.pick_radius = 0.06`.
#[derive(Debug, Default, Clone)]
pub struct FileConfig {
    values: BTreeMap<String, String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config file {}", path.display()))?;
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("config line {} is not `key = value`: {raw:?}", lineno + 1);
            };
            values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(Self { values })
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.values.get(key) {
            None => Ok(None),
            Some(raw) => raw
                .parse::<T>()
                .map(Some)
                .map_err(|e| anyhow::anyhow!("config key {key}: {e}")),
        }
    }

    /// Apply every `sim.*` key onto the simulator configuration through its
    /// JSON representation, so all numeric fields are reachable by name.
    pub fn apply_sim(&self, cfg: &mut SimConfig) -> Result<()> {
        let mut json = serde_json::to_value(&*cfg).expect("SimConfig serializes");
        let obj = json.as_object_mut().expect("SimConfig is an object");
        for (key, value) in &self.values {
            let Some(field) = key.strip_prefix("sim.") else {
                continue;
            };
            let slot = obj
                .get_mut(field)
                .with_context(|| format!("unknown simulator field {field:?}"))?;
            let parsed: f64 = value
                .parse()
                .with_context(|| format!("config key {key} is not numeric"))?;
            *slot = if slot.is_u64() {
                serde_json::Value::from(parsed as u64)
            } else {
                serde_json::Value::from(parsed)
            };
        }
        *cfg = serde_json::from_value(json).context("simulator config out of range")?;
        Ok(())
    }
}

/// Shared context for all subcommands.
pub struct Ctx {
    pub seed: u64,
    pub out_root: PathBuf,
    pub file: FileConfig,
    pub sim: SimConfig,
    pub image_size: usize,
}

impl Ctx {
    pub fn resolve(seed: u64, config: Option<PathBuf>, out: Option<PathBuf>) -> Result<Self> {
        let file = match config {
            Some(path) => FileConfig::load(&path)?,
            None => FileConfig::default(),
        };
        let out_root = out
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("out"));
        let mut sim = SimConfig::default();
        file.apply_sim(&mut sim)?;
        let image_size = file.get_parsed::<usize>("image_size")?.unwrap_or(64);
        Ok(Self {
            seed,
            out_root,
            file,
            sim,
            image_size,
        })
    }
}

/// Write bytes atomically: temp file in the target directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

/// Pretty JSON with a trailing newline; `serde_json` maps keep keys sorted,
/// so reports diff cleanly.
pub fn to_pretty_json(value: &serde_json::Value) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("JSON serializes");
    bytes.push(b'\n');
    bytes
}
