//! Run manifest: config snapshot, per-stage checksums and timings.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub config_hash: String,
    /// Relative path → sha256 of every file read.
    pub inputs: BTreeMap<String, String>,
    /// Relative path → sha256 of every file written.
    pub outputs: BTreeMap<String, String>,
    pub metrics: Vec<String>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: Option<RunConfig>,
    pub stages: BTreeMap<String, StageRecord>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex(&Sha256::digest(&bytes)))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Hash of the settings that influence results; the output directory and
/// thread count are excluded.
pub fn config_hash(cfg: &RunConfig) -> String {
    let mut c = cfg.clone();
    c.run.out = PathBuf::new();
    c.run.jobs = 0;
    hex(&Sha256::digest(serde_json::to_vec(&c).expect("config serializes")))
}

/// Writes `contents` to a sibling temp file, then renames it over `path`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents).with_context(|| format!("writing {}", tmp.display()))?;
    std::fs::rename(&tmp, path).with_context(|| format!("renaming onto {}", path.display()))?;
    Ok(())
}

impl RunManifest {
    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join(MANIFEST_FILE);
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        write_atomic(&out.join(MANIFEST_FILE), text.as_bytes())
    }

    /// True when `stage` ran with this config and none of its inputs or
    /// outputs changed since.
    pub fn is_current(&self, out: &Path, stage: &str, hash: &str) -> bool {
        let Some(rec) = self.stages.get(stage) else { return false };
        let unchanged = |files: &BTreeMap<String, String>| {
            files.iter().all(|(p, sum)| sha256_file(&out.join(p)).is_ok_and(|s| &s == sum))
        };
        rec.config_hash == hash && unchanged(&rec.inputs) && unchanged(&rec.outputs)
    }
}
