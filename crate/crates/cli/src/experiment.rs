//! Single-run orchestration: data, partition, training loop per strategy,
//! evaluation and artifact emission.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use fedvc::concepts::uniform_upsilon;
use fedvc::data::{
    dirichlet_label_partition, feature_shift_partition, load_idx, synth_gmm_dataset,
    ClientPartition, ClientRole, Dataset, ShiftMode,
};
use fedvc::federation::{
    evaluate_global, preference_embeddings, run_round, stream_seed, trunk_embeddings,
    write_checkpoint, ClientState, ServerState, Strategy,
};
use fedvc::metrics::{
    mean_std, preference_cluster_agreement, project_preferences, write_metrics_csv,
    write_projections_csv, MetricsRecord, ProjectionDump, ProjectionPoint, Split,
};
use fedvc::model::ArchConfig;
use fedvc::tensor::Tensor;
use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::config::{DataSource, ExperimentConfig};

pub const DONE_FILE: &str = "DONE";

/// Loads or generates the base dataset.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match cfg.dataset.source {
        DataSource::Synthetic => {
            synth_gmm_dataset(&cfg.dataset.synthetic, stream_seed(cfg.seed, 4, 0))?.0
        }
        DataSource::Idx => {
            let images = cfg
                .dataset
                .images
                .as_ref()
                .context("dataset.images is not set")?;
            let labels = cfg
                .dataset
                .labels
                .as_ref()
                .context("dataset.labels is not set")?;
            load_idx(images, labels).with_context(|| format!("loading {}", images.display()))?
        }
    };
    let ds = match cfg.dataset.max_samples {
        Some(n) if n < ds.len() => {
            let keep: Vec<usize> = (0..n).collect();
            ds.subset(&keep)?
        }
        _ => ds,
    };
    Ok(if cfg.dataset.standardize {
        ds.standardized()
    } else {
        ds
    })
}

/// Applies the configured shift. Feature shift returns the transformed
/// dataset that the partition indexes into.
pub fn build_partition(
    cfg: &ExperimentConfig,
    base: Dataset,
) -> Result<(Dataset, ClientPartition)> {
    let seed = stream_seed(cfg.seed, 5, 0);
    let (data, partition) = match cfg.shift.mode {
        ShiftMode::TargetShift => {
            let p = dirichlet_label_partition(&base, &cfg.shift, seed)?;
            (base, p)
        }
        ShiftMode::FeatureShift => {
            let (d, p, _) = feature_shift_partition(&base, &cfg.shift, seed)?;
            (d, p)
        }
    };
    partition.validate(data.len())?;
    Ok((data, partition))
}

/// Samples used for projections and cluster agreement: every client's local
/// test split, labelled by domain when the dataset has domains and by client
/// group otherwise.
pub struct ProbeSet {
    pub sample_ids: Vec<usize>,
    pub groups: Vec<usize>,
    pub features: Tensor,
    /// `(client id, row range)` blocks in ascending id order.
    pub blocks: Vec<(usize, std::ops::Range<usize>)>,
}

impl ProbeSet {
    pub fn new(data: &Dataset, partition: &ClientPartition) -> Result<Self> {
        let mut sample_ids = Vec::new();
        let mut groups = Vec::new();
        let mut blocks = Vec::new();
        let mut clients: Vec<_> = partition.clients.iter().collect();
        clients.sort_by_key(|c| c.id);
        for c in clients {
            blocks.push((c.id, sample_ids.len()..sample_ids.len() + c.test.len()));
            for &i in &c.test {
                sample_ids.push(i);
                groups.push(match data.domains() {
                    Some(d) => d[i],
                    None => c.group,
                });
            }
        }
        let features = data.features().select_rows(&sample_ids)?;
        Ok(Self {
            sample_ids,
            groups,
            features,
            blocks,
        })
    }

    /// Estimated preferences of every probe sample, each under its own
    /// client's concept weights or, with `uniform`, under uniform weights.
    pub fn preferences(
        &self,
        server: &ServerState,
        clients: &[ClientState],
        arch: &ArchConfig,
        uniform: bool,
    ) -> Result<Tensor> {
        let flat = uniform_upsilon(server.bank.num_concepts());
        let mut parts = Vec::with_capacity(self.blocks.len());
        for (id, range) in &self.blocks {
            let upsilon = match clients.iter().find(|c| c.id == *id) {
                Some(c) if !uniform => c.preference.upsilon(),
                _ => &flat[..],
            };
            let rows: Vec<usize> = range.clone().collect();
            let x = self.features.select_rows(&rows)?;
            parts.push(preference_embeddings(
                &server.params,
                &server.bank,
                arch,
                &x,
                upsilon,
            )?);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        Ok(Tensor::vstack(&refs)?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub clients: usize,
}

impl MeanStd {
    fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self {
            mean,
            std,
            clients: values.len(),
        }
    }
}

/// One role's scores on the local test split at the final evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleSummary {
    pub accuracy: MeanStd,
    pub weighted_auc: MeanStd,
    pub weighted_f1: MeanStd,
}

impl RoleSummary {
    fn of(records: &[&MetricsRecord]) -> Option<Self> {
        if records.is_empty() {
            return None;
        }
        let col = |f: fn(&MetricsRecord) -> f64| records.iter().map(|r| f(r)).collect::<Vec<_>>();
        Some(Self {
            accuracy: MeanStd::of(&col(|r| r.accuracy)),
            weighted_auc: MeanStd::of(&col(|r| r.weighted_auc)),
            weighted_f1: MeanStd::of(&col(|r| r.weighted_f1)),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group_id: usize,
    pub role: String,
    pub accuracy: MeanStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    pub round: usize,
    /// Training participants.
    pub tr: Option<RoleSummary>,
    /// Held-out test clients.
    pub ts: Option<RoleSummary>,
    pub groups: Vec<GroupAccuracy>,
    /// Standard deviation of the per-group mean accuracies.
    pub cross_group_std: f64,
    /// Cluster agreement of estimated preferences (each sample under its
    /// client's concept weights) with the sample groups.
    pub preference_ari: Option<f64>,
    /// The same with uniform concept weights for every sample.
    pub preference_ari_uniform: Option<f64>,
    /// Cluster agreement of the last hidden layer with the sample groups.
    pub trunk_ari: Option<f64>,
    pub bytes_exchanged: u64,
    pub wall_time_secs: f64,
}

impl StrategySummary {
    fn new(
        strategy: Strategy,
        round: usize,
        final_records: &[MetricsRecord],
        preference_ari: [Option<f64>; 2],
        trunk_ari: Option<f64>,
        bytes_exchanged: u64,
        wall_time_secs: f64,
    ) -> Self {
        let test: Vec<&MetricsRecord> = final_records
            .iter()
            .filter(|r| r.split == Split::LocalTest)
            .collect();
        let by_role = |role: ClientRole| {
            let picked: Vec<&MetricsRecord> = test
                .iter()
                .copied()
                .filter(|r| r.role == role.as_str())
                .collect();
            RoleSummary::of(&picked)
        };
        let mut group_ids: Vec<usize> = test.iter().map(|r| r.group_id).collect();
        group_ids.sort_unstable();
        group_ids.dedup();
        let groups: Vec<GroupAccuracy> = group_ids
            .into_iter()
            .map(|g| {
                let members: Vec<&&MetricsRecord> =
                    test.iter().filter(|r| r.group_id == g).collect();
                let acc: Vec<f64> = members.iter().map(|r| r.accuracy).collect();
                let role = if members.iter().all(|r| r.role == members[0].role) {
                    members[0].role.clone()
                } else {
                    "mixed".to_string()
                };
                GroupAccuracy {
                    group_id: g,
                    role,
                    accuracy: MeanStd::of(&acc),
                }
            })
            .collect();
        let means: Vec<f64> = groups.iter().map(|g| g.accuracy.mean).collect();
        Self {
            strategy,
            round,
            tr: by_role(ClientRole::TrainParticipant),
            ts: by_role(ClientRole::HeldOutTest),
            cross_group_std: if means.is_empty() {
                0.0
            } else {
                mean_std(&means).1
            },
            groups,
            preference_ari: preference_ari[0],
            preference_ari_uniform: preference_ari[1],
            trunk_ari,
            bytes_exchanged,
            wall_time_secs,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub run_id: String,
    pub seed: u64,
    pub strategies: Vec<StrategySummary>,
}

impl ExperimentSummary {
    pub fn get(&self, strategy: Strategy) -> Option<&StrategySummary> {
        self.strategies.iter().find(|s| s.strategy == strategy)
    }
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub run_dir: PathBuf,
    pub summary: ExperimentSummary,
    /// Every evaluated round, all strategies, in emission order.
    pub records: Vec<MetricsRecord>,
}

fn cluster_seed(cfg: &ExperimentConfig) -> u64 {
    stream_seed(cfg.seed, 6, 0)
}

/// Trains one strategy from scratch and appends its metrics.
fn run_strategy(
    cfg: &ExperimentConfig,
    strategy: Strategy,
    arch: &ArchConfig,
    data: &Dataset,
    partition: &ClientPartition,
    probe: &ProbeSet,
    run_dir: &Path,
    sinks: &mut Sinks,
) -> Result<StrategySummary> {
    let started = Instant::now();
    let run_id = cfg.run_id();
    let sim = cfg.sim_config(strategy, arch.clone());
    sim.validate()?;
    let mut server = ServerState::new(&sim, cfg.seed)?;
    let mut clients = server.init_clients(&sim, data, partition)?;
    let ckpt_dir = run_dir.join("checkpoints").join(strategy.as_str());
    fs::create_dir_all(&ckpt_dir)?;

    let rounds = sim.federation.rounds;
    let mut last = Vec::new();
    for _ in 0..rounds {
        let report = run_round(&mut server, &mut clients, &sim)
            .with_context(|| format!("{strategy} round {}", server.round))?;
        let round = server.round;
        let is_final = round == rounds;
        if round % sim.federation.eval_every == 0 || is_final {
            let records = evaluate_global(&server, &mut clients, &sim, &run_id, round)?;
            let test: Vec<f64> = records
                .iter()
                .filter(|r| r.split == Split::LocalTest)
                .map(|r| r.accuracy)
                .collect();
            let losses: Vec<f64> = report.clients.iter().map(|c| c.mean_loss).collect();
            info!(
                "{strategy} round {round}/{rounds}: lr {:.5}, cohort {}, train loss {:.4}, mean test accuracy {:.4} ({:.2}s)",
                report.lr,
                report.cohort.len(),
                mean_std(&losses).0,
                mean_std(&test).0,
                report.wall_time_secs
            );
            write_metrics_csv(&mut sinks.metrics, &records, false)?;
            last = records;
        }
        let every = cfg.output.checkpoint_every;
        if (every > 0 && round % every == 0) || is_final {
            write_checkpoint(&ckpt_dir, &server, &clients, strategy.uses_concepts())?;
        }
        let every = cfg.output.projection_every;
        if strategy.uses_concepts() && ((every > 0 && round % every == 0) || is_final) {
            sinks
                .projections
                .push(projection_dump(cfg, &server, &clients, arch, probe, round)?);
        }
    }

    let mut preference_ari = [None, None];
    if strategy.uses_concepts() {
        for (slot, uniform) in preference_ari.iter_mut().zip([false, true]) {
            let p_hat = probe.preferences(&server, &clients, arch, uniform)?;
            *slot = agreement(&p_hat, probe, cluster_seed(cfg));
        }
    }
    let trunk = match strategy {
        Strategy::LocalOnly => None,
        _ => Some(trunk_embeddings(&server.params, arch, &probe.features)?),
    };
    let trunk_ari = trunk.and_then(|t| agreement(&t, probe, cluster_seed(cfg)));
    for c in &clients {
        if c.role == ClientRole::HeldOutTest && c.train_steps() > 0 {
            anyhow::bail!(
                "held-out client {} took {} training steps",
                c.id,
                c.train_steps()
            );
        }
    }
    Ok(StrategySummary::new(
        strategy,
        server.round,
        &last,
        preference_ari,
        trunk_ari,
        server.bytes_exchanged,
        started.elapsed().as_secs_f64(),
    ))
}

fn agreement(points: &Tensor, probe: &ProbeSet, seed: u64) -> Option<f64> {
    match preference_cluster_agreement(points, &probe.groups, seed) {
        Ok(v) => Some(v),
        Err(e) => {
            warn!("cluster agreement unavailable: {e}");
            None
        }
    }
}

fn projection_dump(
    cfg: &ExperimentConfig,
    server: &ServerState,
    clients: &[ClientState],
    arch: &ArchConfig,
    probe: &ProbeSet,
    round: usize,
) -> Result<ProjectionDump> {
    let p_hat = probe.preferences(server, clients, arch, false)?;
    let coords = project_preferences(&p_hat)?;
    let points = coords
        .iter()
        .zip(probe.sample_ids.iter().zip(&probe.groups))
        .map(|(xy, (&sample_id, &group_id))| ProjectionPoint {
            sample_id,
            group_id,
            x: xy[0],
            y: xy[1],
        })
        .collect();
    Ok(ProjectionDump {
        run_id: cfg.run_id(),
        round,
        points,
    })
}

struct Sinks {
    metrics: Vec<u8>,
    projections: Vec<ProjectionDump>,
}

/// Runs every configured strategy on one shared dataset and partition and
/// writes the run directory. `DONE` is written last, so a directory
/// without it holds partial artifacts.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let run_dir = cfg.run_dir();
    fs::create_dir_all(&run_dir).with_context(|| format!("creating {}", run_dir.display()))?;
    let done = run_dir.join(DONE_FILE);
    if done.exists() {
        fs::remove_file(&done)?;
    }
    fs::write(run_dir.join("config.toml"), cfg.to_toml())?;

    let base = load_dataset(cfg)?;
    let arch = cfg.model.resolve(base.dim(), base.num_classes())?;
    let (data, partition) = build_partition(cfg, base)?;
    fs::write(run_dir.join("partition.json"), partition.to_manifest())?;
    let probe = ProbeSet::new(&data, &partition)?;
    info!(
        "{}: {} samples, {} clients ({} training), {} strategies",
        cfg.run_id(),
        data.len(),
        partition.clients.len(),
        partition.train_participants().count(),
        cfg.strategy.names.len()
    );

    let mut sinks = Sinks {
        metrics: Vec::new(),
        projections: Vec::new(),
    };
    write_metrics_csv(&mut sinks.metrics, &[], true)?;
    let mut strategies = Vec::new();
    for &strategy in &cfg.strategy.names {
        strategies.push(run_strategy(
            cfg, strategy, &arch, &data, &partition, &probe, &run_dir, &mut sinks,
        )?);
    }
    fs::write(run_dir.join("metrics.csv"), &sinks.metrics)?;
    if cfg.strategy.names.iter().any(|s| s.uses_concepts()) {
        let file = BufWriter::new(File::create(run_dir.join("projections.csv"))?);
        write_projections_csv(file, &sinks.projections)?;
    }

    let summary = ExperimentSummary {
        run_id: cfg.run_id(),
        seed: cfg.seed,
        strategies,
    };
    fs::write(run_dir.join("summary.txt"), render_summary(&summary))?;
    fs::write(
        run_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary)?,
    )?;
    let records = fedvc::metrics::read_metrics_csv(&sinks.metrics[..])?;
    File::create(&done)?.write_all(b"")?;
    Ok(ExperimentOutcome {
        run_dir,
        summary,
        records,
    })
}

fn pct(m: &MeanStd) -> String {
    format!("{:6.2} ± {:5.2}", 100.0 * m.mean, 100.0 * m.std)
}

fn role_table(
    out: &mut String,
    title: &str,
    summary: &ExperimentSummary,
    pick: fn(&StrategySummary) -> Option<&RoleSummary>,
) {
    out.push_str(&format!("{title}\n"));
    out.push_str(&format!(
        "{:<15} {:>17} {:>17} {:>17}\n",
        "strategy", "accuracy", "weighted AUC", "weighted F1"
    ));
    for s in &summary.strategies {
        match pick(s) {
            Some(r) => out.push_str(&format!(
                "{:<15} {:>17} {:>17} {:>17}\n",
                s.strategy.as_str(),
                pct(&r.accuracy),
                pct(&r.weighted_auc),
                pct(&r.weighted_f1)
            )),
            None => out.push_str(&format!("{:<15} {:>17}\n", s.strategy.as_str(), "n/a")),
        }
    }
    out.push('\n');
}

/// Plain-text summary: mean ± std over clients of local test scores, in
/// percent, with training and held-out clients reported separately.
pub fn render_summary(summary: &ExperimentSummary) -> String {
    let mut out = format!("run {} (seed {})\n\n", summary.run_id, summary.seed);
    role_table(
        &mut out,
        "tr-clients (training participants)",
        summary,
        |s| s.tr.as_ref(),
    );
    role_table(
        &mut out,
        "ts-clients (held out from training)",
        summary,
        |s| s.ts.as_ref(),
    );
    out.push_str("per-group accuracy\n");
    for s in &summary.strategies {
        let groups: Vec<String> = s
            .groups
            .iter()
            .map(|g| format!("g{}={:.2}", g.group_id, 100.0 * g.accuracy.mean))
            .collect();
        out.push_str(&format!(
            "{:<15} {}  (cross-group std {:.2})\n",
            s.strategy.as_str(),
            groups.join(" "),
            100.0 * s.cross_group_std
        ));
    }
    out.push_str("\ncluster agreement (ARI) with sample groups\n");
    for s in &summary.strategies {
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        out.push_str(&format!(
            "{:<15} preferences {:>6} (uniform weights {:>6})  trunk {:>6}  bytes {}\n",
            s.strategy.as_str(),
            fmt(s.preference_ari),
            fmt(s.preference_ari_uniform),
            fmt(s.trunk_ari),
            s.bytes_exchanged
        ));
    }
    out
}
