#![allow(dead_code)]

use fedvc::tensor::{ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    Distribution::<f64>::sample(&StandardNormal, rng)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| scale * normal(rng)).collect(),
    )
    .unwrap()
}

/// A point on the simplex bounded away from its faces.
pub fn rand_simplex(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

pub fn rand_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Relative error, falling back to an absolute comparison when both values
/// are negligibly small.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale < 1e-7 {
        (a - b).abs() * 1e3
    } else {
        (a - b).abs() / scale
    }
}

pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates skipped because a non-differentiable point lies within
    /// the step.
    pub kinks: usize,
}

/// Central differences of `f` with respect to every value of `params`,
/// compared against `analytic`.
pub fn fd_check_params(
    params: &ParamSet,
    analytic: &ParamSet,
    h: f64,
    mut f: impl FnMut(&ParamSet) -> f64,
) -> FdReport {
    let base = f(params);
    let mut report = FdReport {
        max_rel: 0.0,
        checked: 0,
        kinks: 0,
    };
    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let len = params.require(&name).unwrap().len();
        for j in 0..len {
            let mut plus = params.clone();
            plus.get_mut(&name).unwrap().data_mut()[j] += h;
            let mut minus = params.clone();
            minus.get_mut(&name).unwrap().data_mut()[j] -= h;
            let (fp, fm) = (f(&plus), f(&minus));
            let forward = (fp - base) / h;
            let backward = (base - fm) / h;
            if (forward - backward).abs() > 1e-3 * (1.0 + forward.abs().max(backward.abs())) {
                report.kinks += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.require(&name).unwrap().data()[j];
            report.max_rel = report.max_rel.max(rel_err(a, numeric));
            report.checked += 1;
        }
    }
    report
}

/// Central differences of `f` with respect to every entry of `t`.
pub fn fd_check_tensor(
    t: &Tensor,
    analytic: &Tensor,
    h: f64,
    mut f: impl FnMut(&Tensor) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for j in 0..t.len() {
        let mut plus = t.clone();
        plus.data_mut()[j] += h;
        let mut minus = t.clone();
        minus.data_mut()[j] -= h;
        let numeric = (f(&plus) - f(&minus)) / (2.0 * h);
        worst = worst.max(rel_err(analytic.data()[j], numeric));
    }
    worst
}

pub mod fixture {
    use fedvc::data::{
        dirichlet_label_partition, synth_gmm_dataset, ClientPartition, Dataset, ShiftConfig,
        SynthSpec,
    };
    use fedvc::federation::ClientState;
    use fedvc::federation::{ServerState, SimConfig, Strategy};
    use fedvc::model::ArchConfig;

    /// A small target-shift federation: two training groups and one
    /// held-out group of three clients each.
    pub fn data() -> (Dataset, ClientPartition) {
        let spec = SynthSpec {
            num_classes: 4,
            clusters_per_class: 1,
            dim: 6,
            separation: 3.0,
            num_samples: 540,
            noise_std: 1.0,
        };
        let (ds, _) = synth_gmm_dataset(&spec, 3).unwrap();
        let shift = ShiftConfig {
            num_groups: 3,
            train_groups: 2,
            clients_per_group: 3,
            dirichlet_alpha: 1.0,
            ..ShiftConfig::default()
        };
        let partition = dirichlet_label_partition(&ds, &shift, 4).unwrap();
        (ds, partition)
    }

    pub fn config(strategy: Strategy) -> SimConfig {
        let mut cfg = SimConfig {
            arch: ArchConfig {
                input_dim: 6,
                hidden_dims: vec![8],
                num_classes: 4,
                embed_dim: 3,
                ..ArchConfig::default()
            },
            ..SimConfig::default()
        };
        cfg.strategy.strategy = strategy;
        cfg.federation.cohort_size = 4;
        cfg.federation.lr = 0.05;
        cfg.federation.rounds = 3;
        cfg.concepts.num_concepts = 3;
        cfg
    }

    pub fn setup(cfg: &SimConfig, seed: u64) -> (ServerState, Vec<ClientState>) {
        let (ds, partition) = data();
        let mut server = ServerState::new(cfg, seed).unwrap();
        let clients = server.init_clients(cfg, &ds, &partition).unwrap();
        (server, clients)
    }
}
