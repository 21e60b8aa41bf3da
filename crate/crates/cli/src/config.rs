//! Run configuration: training settings plus every artifact path.
//!
//! Saved configs carry all fields; nothing is filled in on load.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mixlm_core::optim::OptimConfig;
use mixlm_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunPaths {
    pub out_dir: PathBuf,
    pub teacher: PathBuf,
    pub ranker: PathBuf,
    pub encoder: PathBuf,
    pub metrics: PathBuf,
    pub cache: PathBuf,
}

impl RunPaths {
    pub fn under(out_dir: &Path) -> Self {
        Self {
            out_dir: out_dir.to_path_buf(),
            teacher: out_dir.join("teacher.ckpt"),
            ranker: out_dir.join("ranker.ckpt"),
            encoder: out_dir.join("encoder.ckpt"),
            metrics: out_dir.join("metrics.jsonl"),
            cache: out_dir.join("embeddings.log"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model_version: String,
    pub train: TrainConfig,
    pub paths: RunPaths,
}

impl RunConfig {
    pub fn desk(seed: u64, out_dir: &Path) -> Self {
        Self {
            seed,
            model_version: format!("desk-{seed}"),
            train: TrainConfig::desk(seed),
            paths: RunPaths::under(out_dir),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    /// Replaces step counts while keeping each stage's peak learning rate.
    pub fn with_steps(mut self, teacher: Option<usize>, joint: Option<usize>) -> Self {
        if let Some(n) = teacher {
            self.train.teacher_optim = rescaled(&self.train.teacher_optim, n);
        }
        if let Some(n) = joint {
            self.train.joint_optim = rescaled(&self.train.joint_optim, n);
        }
        self
    }

    /// Writes the resolved config beside the outputs and returns its path.
    pub fn persist(&self) -> Result<PathBuf> {
        fs::create_dir_all(&self.paths.out_dir)?;
        let path = self.paths.out_dir.join(RESOLVED_CONFIG);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(path)
    }
}

fn rescaled(o: &OptimConfig, total: usize) -> OptimConfig {
    OptimConfig {
        total_steps: total,
        warmup_steps: OptimConfig::with_steps(total, o.peak_lr).warmup_steps,
        ..o.clone()
    }
}
