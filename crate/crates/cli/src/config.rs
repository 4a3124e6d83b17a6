//! Experiment configuration.
//!
//! A config is a TOML document whose sections mirror [`ExperimentConfig`].
//! Every field has a default, so an empty file is a complete config.
//! Overrides are applied in this order, later ones winning:
//!
//! 1. the config file,
//! 2. `--set section.key=value` flags, in the order given,
//! 3. the dedicated `--seed`, `--strategy` and `--out` flags.

use std::path::{Path, PathBuf};

use fedvc::data::{ShiftConfig, ShiftMode, SynthSpec};
use fedvc::federation::{ConceptConfig, FederationConfig, SimConfig, Strategy, StrategyConfig};
use fedvc::model::{Activation, ArchConfig};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("TOML syntax error: {0}")]
    Syntax(String),
    #[error("`{key}`: {reason}")]
    Key { key: String, reason: String },
    #[error("malformed override `{0}`, expected key=value")]
    Override(String),
}

pub type Result<T, E = ConfigError> = std::result::Result<T, E>;

fn key_err(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Key {
        key: key.to_string(),
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    pub synthetic: SynthSpec,
    /// IDX image and label files (optionally gzipped).
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    /// Keep only the first this many samples.
    pub max_samples: Option<usize>,
    /// Z-score every feature column before partitioning.
    pub standardize: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            synthetic: SynthSpec::default(),
            images: None,
            labels: None,
            max_samples: None,
            standardize: true,
        }
    }
}

/// Architecture settings. Input width and class count are taken from the
/// dataset unless given explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub input_dim: Option<usize>,
    pub num_classes: Option<usize>,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let arch = ArchConfig::default();
        Self {
            input_dim: None,
            num_classes: None,
            hidden_dims: arch.hidden_dims,
            embed_dim: arch.embed_dim,
            activation: arch.activation,
        }
    }
}

impl ModelConfig {
    pub fn resolve(&self, input_dim: usize, num_classes: usize) -> Result<ArchConfig> {
        if let Some(d) = self.input_dim.filter(|&d| d != input_dim) {
            return Err(key_err(
                "model.input_dim",
                format!("{d} does not match the dataset width {input_dim}"),
            ));
        }
        if let Some(c) = self.num_classes.filter(|&c| c != num_classes) {
            return Err(key_err(
                "model.num_classes",
                format!("{c} does not match the dataset's {num_classes} classes"),
            ));
        }
        let arch = ArchConfig {
            input_dim,
            hidden_dims: self.hidden_dims.clone(),
            num_classes,
            embed_dim: self.embed_dim,
            activation: self.activation,
        };
        arch.validate()
            .map_err(|e| key_err("model", e.to_string()))?;
        Ok(arch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategySection {
    /// Strategies trained on the same data and partition, one after another.
    pub names: Vec<Strategy>,
    pub fedprox_mu: f64,
    pub finetune_epochs: usize,
}

impl Default for StrategySection {
    fn default() -> Self {
        let d = StrategyConfig::default();
        Self {
            names: vec![d.strategy],
            fedprox_mu: d.fedprox_mu,
            finetune_epochs: d.finetune_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Run directory name; defaults to `seed<seed>`.
    pub run_id: Option<String>,
    /// Write a checkpoint every this many rounds (0: final round only).
    pub checkpoint_every: usize,
    /// Dump preference projections every this many rounds (0: final round only).
    pub projection_every: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            run_id: None,
            checkpoint_every: 0,
            projection_every: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub shift: ShiftConfig,
    pub model: ModelConfig,
    pub strategy: StrategySection,
    pub federation: FederationConfig,
    pub concepts: ConceptConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            dataset: DatasetConfig::default(),
            shift: ShiftConfig::default(),
            model: ModelConfig::default(),
            strategy: StrategySection::default(),
            federation: FederationConfig::default(),
            concepts: ConceptConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

/// Parses `value` as a TOML scalar or array, falling back to a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Sets `dotted.key = value` inside a TOML table, creating sub-tables.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(assignment.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(assignment.to_string()));
    }
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = root;
    for part in &parts[..parts.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| key_err(key, format!("`{part}` is not a section")))?;
    }
    table.insert(
        parts[parts.len() - 1].to_string(),
        parse_override_value(raw.trim()),
    );
    Ok(())
}

impl ExperimentConfig {
    /// Builds a config from TOML text plus `key=value` overrides.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ConfigError::Syntax(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table))
            .map_err(|e| {
                let key = e.path().to_string();
                key_err(&key, e.into_inner().to_string())
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.display().to_string(),
                source,
            })?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn run_id(&self) -> String {
        self.output
            .run_id
            .clone()
            .unwrap_or_else(|| format!("seed{}", self.seed))
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.dir.join(self.run_id())
    }

    /// Simulation settings for one strategy, with the architecture resolved
    /// against the dataset.
    pub fn sim_config(&self, strategy: Strategy, arch: ArchConfig) -> SimConfig {
        SimConfig {
            arch,
            federation: self.federation.clone(),
            strategy: StrategyConfig {
                strategy,
                fedprox_mu: self.strategy.fedprox_mu,
                finetune_epochs: self.strategy.finetune_epochs,
            },
            concepts: self.concepts.clone(),
        }
    }

    /// Constraint checks that do not need the dataset.
    pub fn validate(&self) -> Result<()> {
        self.shift
            .validate()
            .map_err(|e| key_err("shift", e.to_string()))?;
        if self.strategy.names.is_empty() {
            return Err(key_err(
                "strategy.names",
                "at least one strategy is required",
            ));
        }
        if self.dataset.source == DataSource::Idx
            && (self.dataset.images.is_none() || self.dataset.labels.is_none())
        {
            return Err(key_err(
                "dataset.images",
                "idx source needs both dataset.images and dataset.labels",
            ));
        }
        if self.dataset.max_samples == Some(0) {
            return Err(key_err("dataset.max_samples", "must be positive"));
        }
        let c = &self.concepts;
        if !(c.kappa > 0.0 && c.kappa < 1.0) {
            return Err(key_err(
                "concepts.kappa",
                format!("must lie in (0, 1), got {}", c.kappa),
            ));
        }
        if self.shift.mode == ShiftMode::TargetShift && self.dataset.source == DataSource::Synthetic
        {
            let n = self.dataset.synthetic.num_samples;
            let clients = self.shift.num_groups * self.shift.clients_per_group;
            if n < 2 * clients {
                return Err(key_err(
                    "dataset.synthetic.num_samples",
                    format!("{n} samples cannot cover {clients} clients"),
                ));
            }
        }
        // Dataset-independent part of the simulation checks.
        let probe = self.sim_config(
            self.strategy.names[0],
            ArchConfig {
                embed_dim: self.model.embed_dim,
                hidden_dims: self.model.hidden_dims.clone(),
                activation: self.model.activation,
                ..ArchConfig::default()
            },
        );
        probe.validate().map_err(|e| {
            let msg = e.to_string();
            let key = msg
                .split_whitespace()
                .find(|w| w.contains('.'))
                .map(|w| w.trim_end_matches(':').to_string())
                .unwrap_or_else(|| "model".to_string());
            key_err(&key, msg)
        })?;
        Ok(())
    }
}
