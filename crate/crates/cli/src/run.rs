//! Run directories.
//!
//! ```text
//! <out>/<run_id>/config.toml      [model] and [training] tables as used
//! <out>/<run_id>/metrics.jsonl    one JSON object per epoch: epoch, lr,
//!                                 iterations, cls_loss[], box_loss[],
//!                                 total_loss, max_grad_norm, wall_seconds
//! <out>/<run_id>/checkpoint.ckpt  parameters (fscascade checkpoint format)
//! <out>/<run_id>/run.json         the RunRecord
//! <out>/<run_id>/eval-<mode>.csv  written by `eval`: one APReport row
//! <out>/<run_id>/detections-<mode>.csv  detection dump written by `eval`
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use fscascade::model::ModelConfig;
use fscascade::synth::MANIFEST_FILE;
use fscascade::training::TrainConfig;
use serde::{Deserialize, Serialize};
use sha1::{Digest, Sha1};

pub const RUN_FILE: &str = "run.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub training: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: RunConfig,
    /// Paths relative to the run directory.
    pub checkpoint: String,
    pub metric_log: String,
    pub data_dir: PathBuf,
    /// Git blob hash of the dataset manifest the run was trained on.
    pub dataset_manifest_sha1: String,
}

impl RunRecord {
    pub fn load(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(RUN_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn save(&self, run_dir: &Path) -> Result<()> {
        let path = run_dir.join(RUN_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").with_context(|| format!("writing {}", path.display()))
    }
}

/// `sha1("blob <len>\0" ++ bytes)`, as `git hash-object` computes it.
pub fn git_blob_sha1(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn manifest_hash(data_dir: &Path) -> Result<String> {
    let path = data_dir.join(MANIFEST_FILE);
    let bytes = fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(git_blob_sha1(&bytes))
}

/// `base`, or `base-2`, `base-3`, ... whichever does not exist under `out`.
pub fn unique_run_id(out: &Path, base: &str) -> String {
    if !out.join(base).exists() {
        return base.to_string();
    }
    (2..)
        .map(|k| format!("{base}-{k}"))
        .find(|id| !out.join(id).exists())
        .expect("unbounded search")
}
