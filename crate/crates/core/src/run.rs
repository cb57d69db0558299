//! Run directories.
//!
//! ```text
//! <root>/<config-hash[..12]>-<UTC timestamp>/
//!     config.toml        resolved configuration
//!     manifest.json      seed, config hash, code version, creation time
//!     metrics.jsonl      one StepMetrics record per optimizer step
//!     pr.jsonl           precision/recall records (when enabled)
//!     checkpoints/       epoch-NNNN.ckpt and last.ckpt
//! ```

use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{CghError, Result};
use crate::eval::PrRecord;
use crate::train::{StepMetrics, TrainState};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub created: String,
}

#[derive(Debug, Clone)]
pub struct RunDir {
    path: PathBuf,
}

impl RunDir {
    /// Creates a fresh, uniquely named run directory under `root`.
    pub fn create(root: &Path, cfg: &TrainConfig) -> Result<Self> {
        fs::create_dir_all(root)?;
        let hash = cfg.hash();
        let now = chrono::Utc::now();
        let stem = format!("{}-{}", &hash[..12], now.format("%Y%m%dT%H%M%S%3fZ"));
        let mut path = root.join(&stem);
        let mut n = 1;
        while path.exists() {
            path = root.join(format!("{stem}-{n}"));
            n += 1;
        }
        fs::create_dir_all(path.join("checkpoints"))?;
        fs::write(path.join("config.toml"), cfg.to_toml_string())?;
        let manifest = Manifest {
            seed: cfg.seed,
            config_hash: hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            created: now.to_rfc3339(),
        };
        fs::write(path.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest serializes"))?;
        fs::write(path.join("metrics.jsonl"), "")?;
        Ok(Self { path })
    }

    pub fn open(path: &Path) -> Result<Self> {
        if !path.join("manifest.json").is_file() {
            return Err(CghError::Checkpoint(format!("{} is not a run directory", path.display())));
        }
        Ok(Self { path: path.to_path_buf() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn config_path(&self) -> PathBuf {
        self.path.join("config.toml")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.path.join("metrics.jsonl")
    }

    pub fn pr_path(&self) -> PathBuf {
        self.path.join("pr.jsonl")
    }

    pub fn last_checkpoint(&self) -> PathBuf {
        self.path.join("checkpoints").join("last.ckpt")
    }

    pub fn manifest(&self) -> Result<Manifest> {
        let text = fs::read_to_string(self.path.join("manifest.json"))?;
        serde_json::from_str(&text).map_err(|e| CghError::Checkpoint(format!("manifest: {e}")))
    }

    fn append_lines<T: Serialize>(&self, path: &Path, items: &[T]) -> Result<()> {
        let mut f = OpenOptions::new().create(true).append(true).open(path)?;
        for it in items {
            writeln!(f, "{}", serde_json::to_string(it).expect("record serializes"))?;
        }
        Ok(())
    }

    pub fn append_metrics(&self, m: &StepMetrics) -> Result<()> {
        self.append_lines(&self.metrics_path(), std::slice::from_ref(m))
    }

    pub fn append_pr(&self, recs: &[PrRecord]) -> Result<()> {
        self.append_lines(&self.pr_path(), recs)
    }

    pub fn read_metrics(&self) -> Result<Vec<StepMetrics>> {
        read_jsonl(&self.metrics_path())
    }

    pub fn read_pr(&self) -> Result<Vec<PrRecord>> {
        if !self.pr_path().exists() {
            return Ok(Vec::new());
        }
        read_jsonl(&self.pr_path())
    }

    /// Drops log records written after the checkpoint being resumed.
    pub fn truncate_logs(&self, step: usize, epoch: usize) -> Result<()> {
        let kept: Vec<StepMetrics> = self.read_metrics()?.into_iter().filter(|m| m.step <= step).collect();
        fs::write(self.metrics_path(), "")?;
        self.append_lines(&self.metrics_path(), &kept)?;
        if self.pr_path().exists() {
            let kept: Vec<PrRecord> = self.read_pr()?.into_iter().filter(|r| r.epoch.is_none_or(|e| e < epoch)).collect();
            fs::write(self.pr_path(), "")?;
            self.append_lines(&self.pr_path(), &kept)?;
        }
        Ok(())
    }

    /// Writes `epoch-NNNN.ckpt`, refreshes `last.ckpt`, prunes old epochs.
    pub fn save_checkpoint(&self, state: &TrainState, epoch: usize, keep: usize) -> Result<PathBuf> {
        let dir = self.path.join("checkpoints");
        fs::create_dir_all(&dir)?;
        let archive = state.to_archive()?;
        let path = dir.join(format!("epoch-{epoch:04}.ckpt"));
        archive.save_atomic(&path)?;
        archive.save_atomic(&self.last_checkpoint())?;
        if keep > 0 {
            let mut epochs: Vec<PathBuf> = fs::read_dir(&dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("epoch-") && n.ends_with(".ckpt")))
                .collect();
            epochs.sort();
            let excess = epochs.len().saturating_sub(keep);
            for old in &epochs[..excess] {
                fs::remove_file(old)?;
            }
        }
        Ok(path)
    }
}

fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| CghError::Checkpoint(format!("{}:{}: {e}", path.display(), i + 1)))?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{BackboneId, DatasetId};

    #[test]
    fn create_writes_snapshot_and_manifest() {
        let root = tempfile::tempdir().unwrap();
        let cfg = TrainConfig::new(DatasetId::Synthetic, BackboneId::ResnetTiny);
        let a = RunDir::create(root.path(), &cfg).unwrap();
        let b = RunDir::create(root.path(), &cfg).unwrap();
        assert_ne!(a.path(), b.path());
        let snap = fs::read_to_string(a.config_path()).unwrap();
        assert_eq!(TrainConfig::from_toml_str(&snap).unwrap(), cfg);
        let m = a.manifest().unwrap();
        assert_eq!(m.config_hash, cfg.hash());
        assert!(a.path().file_name().unwrap().to_str().unwrap().starts_with(&cfg.hash()[..12]));
        assert!(RunDir::open(root.path()).is_err());
    }
}
