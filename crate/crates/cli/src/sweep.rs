//! One-axis hyperparameter sweeps.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use anyhow::{bail, Context, Result};
use fedvc::federation::Strategy;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::experiment::{run_experiment, ExperimentSummary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    /// Number of virtual concepts.
    NumConcepts,
    /// Embedding and concept dimension.
    EmbedDim,
    Iota,
    Kappa,
    Gamma,
}

impl SweepAxis {
    pub fn key(self) -> &'static str {
        match self {
            SweepAxis::NumConcepts => "concepts.num_concepts",
            SweepAxis::EmbedDim => "model.embed_dim",
            SweepAxis::Iota => "concepts.iota",
            SweepAxis::Kappa => "concepts.kappa",
            SweepAxis::Gamma => "concepts.gamma",
        }
    }

    fn is_integer(self) -> bool {
        matches!(self, SweepAxis::NumConcepts | SweepAxis::EmbedDim)
    }

    /// TOML literal for one sweep value.
    pub fn literal(self, value: f64) -> Result<String> {
        if self.is_integer() {
            if value.fract() != 0.0 || value < 1.0 {
                bail!("{} takes positive integers, got {value}", self.key());
            }
            Ok(format!("{}", value as u64))
        } else {
            Ok(format!("{value:?}"))
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    pub seeds: Vec<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Isolation {
    /// Every run in a fresh child process of `exe`.
    Process,
    /// Runs in the calling process.
    InProcess,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub value: f64,
    pub strategy: Strategy,
    pub seeds: usize,
    /// Mean over seeds of the per-run client-mean accuracy.
    pub tr_accuracy: f64,
    pub ts_accuracy: Option<f64>,
    pub tr_accuracy_std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    pub cells: Vec<SweepCell>,
}

impl SweepTable {
    pub fn cell(&self, value: f64, strategy: Strategy) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.value == value && c.strategy == strategy)
    }

    pub fn render(&self) -> String {
        let mut out = format!("sweep over {}\n", self.axis.key());
        out.push_str(&format!(
            "{:>10} {:<15} {:>6} {:>16} {:>10}\n",
            "value", "strategy", "seeds", "tr accuracy", "ts accuracy"
        ));
        for c in &self.cells {
            let ts = c
                .ts_accuracy
                .map_or("n/a".to_string(), |v| format!("{:.2}", 100.0 * v));
            out.push_str(&format!(
                "{:>10} {:<15} {:>6} {:>8.2} ± {:>5.2} {:>10}\n",
                c.value,
                c.strategy.as_str(),
                c.seeds,
                100.0 * c.tr_accuracy,
                100.0 * c.tr_accuracy_std,
                ts
            ));
        }
        out
    }
}

/// Config for one sweep point, written under `<out>/sweep_<axis>/`.
pub fn point_config(
    base: &ExperimentConfig,
    axis: SweepAxis,
    value: f64,
    seed: u64,
) -> Result<ExperimentConfig> {
    let literal = axis.literal(value)?;
    let mut text = base.to_toml();
    // Re-parse through the override path so that sweep values get the same
    // validation as hand-written ones.
    text.push('\n');
    let mut cfg = ExperimentConfig::from_toml_str(&text, &[format!("{}={literal}", axis.key())])?;
    cfg.seed = seed;
    cfg.output.dir = sweep_dir(base, axis);
    cfg.output.run_id = Some(format!("{}={literal}_seed{seed}", axis_name(axis)));
    cfg.validate()?;
    Ok(cfg)
}

fn axis_name(axis: SweepAxis) -> &'static str {
    axis.key().rsplit('.').next().expect("dotted key")
}

pub fn sweep_dir(base: &ExperimentConfig, axis: SweepAxis) -> PathBuf {
    base.output.dir.join(format!("sweep_{}", axis_name(axis)))
}

fn run_child(exe: &Path, cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let dir = cfg.run_dir();
    fs::create_dir_all(&dir)?;
    let cfg_path = dir.join("requested.toml");
    fs::write(&cfg_path, cfg.to_toml())?;
    let status = Command::new(exe)
        .arg("run")
        .arg("--config")
        .arg(&cfg_path)
        .status()
        .with_context(|| format!("spawning {}", exe.display()))?;
    if !status.success() {
        bail!("run {} exited with {status}", cfg.run_id());
    }
    let text = fs::read_to_string(dir.join("summary.json"))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}/summary.json", dir.display()))
}

/// Runs every (value, seed) point with all other settings at their base
/// values and aggregates train and held-out accuracy per strategy.
pub fn run_sweep(
    base: &ExperimentConfig,
    spec: &SweepSpec,
    isolation: Isolation,
) -> Result<SweepTable> {
    if spec.values.is_empty() || spec.seeds.is_empty() {
        bail!("a sweep needs at least one value and one seed");
    }
    let exe = std::env::current_exe()?;
    let mut cells = Vec::new();
    for &value in &spec.values {
        let mut runs = Vec::new();
        for &seed in &spec.seeds {
            let cfg = point_config(base, spec.axis, value, seed)?;
            log::info!("sweep {}: {}", spec.axis.key(), cfg.run_id());
            runs.push(match isolation {
                Isolation::Process => run_child(&exe, &cfg)?,
                Isolation::InProcess => run_experiment(&cfg)?.summary,
            });
        }
        for &strategy in &base.strategy.names {
            let tr: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.get(strategy)?.tr.as_ref().map(|t| t.accuracy.mean))
                .collect();
            let ts: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.get(strategy)?.ts.as_ref().map(|t| t.accuracy.mean))
                .collect();
            let (tr_mean, tr_std) = fedvc::metrics::mean_std(&tr);
            cells.push(SweepCell {
                value,
                strategy,
                seeds: runs.len(),
                tr_accuracy: tr_mean,
                ts_accuracy: (!ts.is_empty()).then(|| fedvc::metrics::mean_std(&ts).0),
                tr_accuracy_std: tr_std,
            });
        }
    }
    let table = SweepTable {
        axis: spec.axis,
        cells,
    };
    let dir = sweep_dir(base, spec.axis);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("sweep_summary.txt"), table.render())?;
    fs::write(
        dir.join("sweep_summary.json"),
        serde_json::to_string_pretty(&table)?,
    )?;
    Ok(table)
}
