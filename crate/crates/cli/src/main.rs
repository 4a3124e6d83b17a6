use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedvc::data::{ClientPartition, ClientRole};
use fedvc::federation::{read_checkpoint, Strategy};
use fedvc_cli::experiment::{build_partition, load_dataset, render_summary};
use fedvc_cli::{run_experiment, run_sweep, ExperimentConfig, Isolation, SweepAxis, SweepSpec};

#[derive(Parser)]
#[command(
    name = "fedvc",
    version,
    about = "Federated virtual-concept learning simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config; omitted means all defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set concepts.iota=0.01`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output root; the run directory is `<out>/<run_id>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Strategy to train. Repeatable; replaces `strategy.names`.
    #[arg(long = "strategy")]
    strategies: Vec<Strategy>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        if !self.strategies.is_empty() {
            cfg.strategy.names = self.strategies.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured strategy and write the run directory.
    Run(ConfigArgs),
    /// Repeat a run over values of one hyperparameter.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Run every point inside this process instead of a child process.
        #[arg(long)]
        in_process: bool,
    },
    /// Print the contents of a checkpoint file.
    InspectCkpt { path: PathBuf },
    /// Build the configured partition (or load a manifest) and report its
    /// per-client composition.
    PartitionAudit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Audit an existing `partition.json` instead of building one.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FEDVC_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("FEDVC_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()?;
    }
    Ok(())
}

fn inspect(path: &PathBuf) -> Result<()> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ckpt = read_checkpoint(&bytes)?;
    println!(
        "{}: {} parameter tensors, {} values",
        path.display(),
        ckpt.params.len(),
        ckpt.params.num_values()
    );
    for (name, t) in ckpt.params.iter() {
        let norm = t.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("  {name:<16} {:?}  l2 {norm:.4}", t.shape());
    }
    if let Some(c) = &ckpt.concepts {
        println!("concepts {:?}", c.shape());
        for m in 0..c.rows() {
            let row: Vec<String> = c.row_slice(m).iter().map(|v| format!("{v:.3}")).collect();
            println!("  c{m}: [{}]", row.join(", "));
        }
    }
    for (id, u) in &ckpt.upsilon {
        let row: Vec<String> = u.iter().map(|v| format!("{v:.3}")).collect();
        println!("  client {id} upsilon [{}]", row.join(", "));
    }
    Ok(())
}

fn audit(config: &ConfigArgs, manifest: Option<&PathBuf>) -> Result<()> {
    let cfg = config.resolve()?;
    let base = load_dataset(&cfg)?;
    let (data, partition) = match manifest {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            let p = ClientPartition::from_manifest(&text)?;
            p.validate(base.len())?;
            (base, p)
        }
        None => build_partition(&cfg, base)?,
    };
    println!(
        "{} samples, {} groups, {} clients ({} training, {} held out)",
        data.len(),
        partition.num_groups,
        partition.clients.len(),
        partition.train_participants().count(),
        partition.held_out().count()
    );
    println!(
        "{:>6} {:>6} {:>9} {:>6} {:>6}  train class histogram",
        "client", "group", "role", "train", "test"
    );
    for c in &partition.clients {
        let hist = data.subset(&c.train)?.class_histogram();
        let role = match c.role {
            ClientRole::TrainParticipant => "train",
            ClientRole::HeldOutTest => "held_out",
        };
        println!(
            "{:>6} {:>6} {:>9} {:>6} {:>6}  {:?}",
            c.id,
            c.group,
            role,
            c.train.len(),
            c.test.len(),
            hist
        );
    }
    println!("partition is complete and disjoint");
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let cfg = args.resolve()?;
            let outcome = run_experiment(&cfg)?;
            print!("{}", render_summary(&outcome.summary));
            println!("artifacts in {}", outcome.run_dir.display());
        }
        Command::Sweep {
            config,
            axis,
            values,
            seeds,
            in_process,
        } => {
            let cfg = config.resolve()?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let spec = SweepSpec {
                axis,
                values,
                seeds,
            };
            let isolation = if in_process {
                Isolation::InProcess
            } else {
                Isolation::Process
            };
            print!("{}", run_sweep(&cfg, &spec, isolation)?.render());
        }
        Command::InspectCkpt { path } => inspect(&path)?,
        Command::PartitionAudit { config, manifest } => audit(&config, manifest.as_ref())?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads().and_then(|_| dispatch(cli)) {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    ExitCode::SUCCESS
}
