//! Run configuration: one TOML file describing model, data, training plans
//! and report settings. The hash of its resolved form names the run directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{TaskKind, TaskSpec, World};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, BLOCK_MATRICES};
use crate::training::{Strategy, TrainingPlan};

/// The checked-in configuration with every default spelled out.
pub const DEFAULT_CONFIG: &str = include_str!("../../configs/default.toml");

/// Overrides the output root of every command.
pub const OUT_ENV: &str = "PARASHIFT_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed. It replaces the seed of the model and of every training
    /// plan, and offsets the per-task data seeds.
    #[serde(default)]
    pub seed: u64,
    /// Fraction of the pretraining set used as importance probe.
    #[serde(default = "default_probe_ratio")]
    pub probe_ratio: f64,
    /// Output root; run directories are created below it. Not part of the
    /// config hash.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    pub data: DataConfig,
    pub pretrain: TrainingPlan,
    /// Adaptor-alignment stage run after text pretraining; skipped when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub align: Option<TrainingPlan>,
    /// Fine-tuning arms of the experiment grid.
    #[serde(default)]
    pub arms: Vec<TrainingPlan>,
    #[serde(default)]
    pub deactivation: DeactivationConfig,
    #[serde(default)]
    pub rank_cluster: RankClusterConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Text pretraining tasks; their eval splits form the perplexity sets.
    pub pretrain: Vec<TaskSpec>,
    /// Speech fine-tuning tasks of the grid arms (train splits only).
    #[serde(default)]
    pub finetune: Vec<TaskSpec>,
    /// Pretraining tasks whose eval splits are the grid's question set.
    #[serde(default)]
    pub benchmark: Vec<TaskKind>,
    /// Share of the pretraining set used for adaptor alignment.
    #[serde(default = "default_align_ratio")]
    pub align_ratio: f64,
}

fn default_align_ratio() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeactivationConfig {
    pub fraction: f64,
}

impl Default for DeactivationConfig {
    fn default() -> Self {
        Self { fraction: 0.03 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankClusterConfig {
    /// Share of cells counted as "top" in each matrix.
    pub top_fraction: f64,
    /// Matrices rendered as heatmaps; empty means every block matrix of the
    /// first and last layer.
    pub matrices: Vec<String>,
}

impl Default for RankClusterConfig {
    fn default() -> Self {
        Self {
            top_fraction: 0.05,
            matrices: Vec::new(),
        }
    }
}

fn default_probe_ratio() -> f64 {
    1.0 / 30.0
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; a missing or unreadable file is a config error.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn default_config() -> Self {
        Self::parse(DEFAULT_CONFIG).expect("checked-in default config parses")
    }

    /// Copy with the global seed pushed into the model and every plan.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.model.seed = c.seed;
        for plan in c.arms.iter_mut().chain(&mut c.align).chain(std::iter::once(&mut c.pretrain)) {
            plan.seed = c.seed;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.probe_ratio > 0.0 && self.probe_ratio <= 1.0) {
            return Err(Error::Config(format!("probe_ratio {} outside (0, 1]", self.probe_ratio)));
        }
        if !(self.data.align_ratio > 0.0 && self.data.align_ratio <= 1.0) {
            return Err(Error::Config(format!("data.align_ratio {} outside (0, 1]", self.data.align_ratio)));
        }
        if self.data.pretrain.is_empty() {
            return Err(Error::Config("data.pretrain lists no tasks".into()));
        }
        let world = self.world();
        for spec in self.data.pretrain.iter().chain(&self.data.finetune) {
            spec.validate(&world)?;
        }
        for kind in &self.data.benchmark {
            if !self.data.pretrain.iter().any(|s| s.kind == *kind) {
                return Err(Error::Config(format!("benchmark task {kind} is not a pretraining task")));
            }
        }
        if self.pretrain.strategy != Strategy::PretrainText {
            return Err(Error::Config("the pretrain plan must use strategy pretrain-text".into()));
        }
        if let Some(a) = &self.align {
            if a.strategy != Strategy::AlignAdaptor {
                return Err(Error::Config("the align plan must use strategy align-adaptor".into()));
            }
        }
        for plan in self.arms.iter().chain(&self.align).chain(std::iter::once(&self.pretrain)) {
            plan.validate()?;
        }
        if let Some(p) = self
            .arms
            .iter()
            .find(|p| matches!(p.strategy, Strategy::PretrainText | Strategy::AlignAdaptor))
        {
            return Err(Error::Config(format!("arm `{}` is not a fine-tuning strategy", p.label())));
        }
        let labels: std::collections::BTreeSet<String> = self.arms.iter().map(TrainingPlan::label).collect();
        if labels.len() != self.arms.len() {
            return Err(Error::Config("arm labels must be unique".into()));
        }
        if !(0.0..=1.0).contains(&self.deactivation.fraction) {
            return Err(Error::Config(format!(
                "deactivation fraction {} outside [0, 1]",
                self.deactivation.fraction
            )));
        }
        if !(self.rank_cluster.top_fraction > 0.0 && self.rank_cluster.top_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "rank_cluster.top_fraction {} outside (0, 1]",
                self.rank_cluster.top_fraction
            )));
        }
        Ok(())
    }

    pub fn world(&self) -> World {
        World {
            vocab_size: self.model.vocab_size,
            feature_dim: self.model.feature_dim,
            seed: self.seed,
        }
    }

    /// Data seed of one task: the task's own seed offset by the global seed.
    pub fn task_spec(&self, spec: &TaskSpec) -> TaskSpec {
        TaskSpec {
            seed: self.seed.wrapping_mul(1000).wrapping_add(spec.seed),
            ..spec.clone()
        }
    }

    /// Matrices rendered by `rank-cluster` and the grid's change maps.
    pub fn cluster_matrices(&self) -> Vec<String> {
        if !self.rank_cluster.matrices.is_empty() {
            return self.rank_cluster.matrices.clone();
        }
        let last = self.model.n_layers - 1;
        let mut layers = vec![0];
        if last > 0 {
            layers.push(last);
        }
        layers
            .into_iter()
            .flat_map(|l| BLOCK_MATRICES.map(|m| format!("layer.{l}.{m}")))
            .collect()
    }

    /// Canonical TOML of the resolved config, output root excluded.
    pub fn canonical(&self) -> String {
        let mut c = self.resolved();
        c.out_dir = PathBuf::new();
        toml::to_string(&c).expect("run config serializes")
    }

    /// Hex SHA-256 of [`Self::canonical`].
    pub fn hash(&self) -> String {
        Sha256::digest(self.canonical().as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// `<root>/<first 16 hex digits of the hash>`.
    pub fn run_dir(&self, root: &Path) -> PathBuf {
        root.join(&self.hash()[..16])
    }
}
