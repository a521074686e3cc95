//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::complement::{ComplementConfig, GateArity, InnerProductScope, VariantKind};
use crate::hosts::HostKind;
use crate::train::data::{self, DataError, Dataset, SyntheticDatasetSpec};
use crate::train::optim::AdamWHyper;
use crate::vit::{BackboneConfig, ConfigError as BackboneError, FfnVariant};

/// Overrides `output_dir` when set.
pub const OUTPUT_ROOT_ENV: &str = "OQC_OUTPUT_ROOT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{field}: {reason}")]
    Invalid { field: String, reason: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Data(#[from] DataError),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// Which variants an experiment trains.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Matrix {
    /// Only `variant`.
    #[default]
    Single,
    /// Base, +PR, +OQC-LR and +OQC-LR+PR for both hosts.
    Decomposition,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneDims {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    #[serde(default)]
    pub use_pr_readout: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fixed gradient shard size; results do not depend on the thread count.
    pub shard_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            peak_lr: 2e-3,
            weight_decay: 0.05,
            warmup_frac: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            shard_size: 16,
        }
    }
}

impl OptimizerConfig {
    pub fn adamw(&self) -> AdamWHyper {
        AdamWHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    Synthetic(SyntheticDatasetSpec),
    /// `path/<class>/*.ppm`.
    Folder { path: PathBuf, test_fraction: f64 },
}

impl DatasetConfig {
    pub fn load(&self, image_size: usize) -> Result<Dataset, DataError> {
        match self {
            DatasetConfig::Synthetic(spec) => spec.generate(image_size),
            DatasetConfig::Folder { path, test_fraction } => data::load_folder(path, image_size, *test_fraction),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub max_samples: usize,
    pub batch_size: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            max_samples: 2048,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub precision: Precision,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub matrix: Matrix,
    pub backbone: BackboneDims,
    pub variant: FfnVariant,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, path: &Path) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml_str(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn n_classes(&self) -> Option<usize> {
        match &self.dataset {
            DatasetConfig::Synthetic(s) => Some(s.n_classes),
            DatasetConfig::Folder { .. } => None,
        }
    }

    pub fn backbone_config(&self, n_classes: usize) -> BackboneConfig {
        let b = self.backbone;
        BackboneConfig {
            depth: b.depth,
            width: b.width,
            heads: b.heads,
            patch: b.patch,
            image_size: b.image_size,
            in_channels: 3,
            n_classes,
            ffn: self.variant,
            use_pr_readout: b.use_pr_readout,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "need at least one seed"));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != self.seeds.len() {
            return Err(invalid("seeds", "seeds must be distinct"));
        }
        let o = &self.optimizer;
        if o.epochs == 0 {
            return Err(invalid("optimizer.epochs", "must be positive"));
        }
        if o.batch_size == 0 || o.shard_size == 0 {
            return Err(invalid("optimizer.batch_size", "batch and shard sizes must be positive"));
        }
        if !(o.peak_lr > 0.0 && o.peak_lr.is_finite()) {
            return Err(invalid("optimizer.peak_lr", format!("{} must be positive", o.peak_lr)));
        }
        if o.weight_decay.is_nan() || o.weight_decay < 0.0 {
            return Err(invalid("optimizer.weight_decay", "must be non-negative"));
        }
        if !(0.0..1.0).contains(&o.warmup_frac) {
            return Err(invalid("optimizer.warmup_frac", format!("{} not in [0, 1)", o.warmup_frac)));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || o.eps.is_nan() || o.eps <= 0.0 {
            return Err(invalid("optimizer.beta1", "betas must lie in [0, 1) and eps must be positive"));
        }
        if self.analysis.max_samples < 2 || self.analysis.batch_size == 0 {
            return Err(invalid("analysis.max_samples", "need at least two samples and a positive batch"));
        }
        match &self.dataset {
            DatasetConfig::Synthetic(s) => s.validate(self.backbone.image_size)?,
            DatasetConfig::Folder { test_fraction, .. } => {
                if !(*test_fraction > 0.0 && *test_fraction < 1.0) {
                    return Err(invalid("dataset.test_fraction", "must lie in (0, 1)"));
                }
            }
        }
        // Class count is only known up front for synthetic data; 2 is enough
        // to check everything else.
        self.backbone_config(self.n_classes().unwrap_or(2)).validate()?;
        if self.matrix == Matrix::Decomposition {
            for cell in self.decomposition_cells() {
                cell.config.backbone_config(2).validate()?;
            }
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form, ignoring `output_dir`.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn output_root(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_ENV) {
            Some(p) if !p.is_empty() => PathBuf::from(p),
            _ => self.output_dir.clone(),
        }
    }

    /// The same experiment with a different variant or readout.
    pub fn derive(&self, variant: FfnVariant, use_pr_readout: bool, matrix: Matrix) -> Self {
        let mut c = self.clone();
        c.variant = variant;
        c.backbone.use_pr_readout = use_pr_readout;
        c.matrix = matrix;
        c
    }

    /// The low-rank complement used by the decomposition and the rank sweep.
    pub fn low_rank_complement(&self) -> ComplementConfig {
        match self.variant.complement {
            Some(c) if c.kind == VariantKind::LowRank => c,
            Some(c) => ComplementConfig {
                kind: VariantKind::LowRank,
                ..c
            },
            None => ComplementConfig {
                kind: VariantKind::LowRank,
                rank: 56.min(self.backbone.width.saturating_sub(1)).max(1),
                scope: InnerProductScope::PerToken,
                gate_arity: GateArity::PerToken,
            },
        }
    }

    /// Eight single-variant configs: four conditions for each host.
    pub fn decomposition_cells(&self) -> Vec<Cell> {
        let groups = match self.variant.host {
            HostKind::Bilinear { groups } => groups,
            HostKind::Mlp => 4,
        };
        let lr = self.low_rank_complement();
        let mut cells = Vec::with_capacity(8);
        for host in [HostKind::Mlp, HostKind::Bilinear { groups }] {
            for condition in Condition::ALL {
                let complement = condition.has_complement().then_some(lr);
                let variant = FfnVariant { host, complement };
                cells.push(Cell {
                    condition,
                    host,
                    config: self.derive(variant, condition.has_pr(), Matrix::Single),
                });
            }
        }
        cells
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Condition {
    Base,
    Pr,
    OqcLr,
    OqcLrPr,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Base, Condition::Pr, Condition::OqcLr, Condition::OqcLrPr];

    pub fn label(&self) -> &'static str {
        match self {
            Condition::Base => "Base",
            Condition::Pr => "+PR",
            Condition::OqcLr => "+OQC-LR",
            Condition::OqcLrPr => "+OQC-LR+PR",
        }
    }

    pub fn has_pr(&self) -> bool {
        matches!(self, Condition::Pr | Condition::OqcLrPr)
    }

    pub fn has_complement(&self) -> bool {
        matches!(self, Condition::OqcLr | Condition::OqcLrPr)
    }
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub condition: Condition,
    pub host: HostKind,
    pub config: ExperimentConfig,
}
