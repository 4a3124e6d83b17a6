//! Non-IID partitions: label marginals, split arithmetic and a golden manifest.

use std::path::PathBuf;

use fedvc::data::{
    dirichlet_label_partition, feature_shift_partition, ClientPartition, ClientRole, Dataset,
    ShiftConfig, ShiftMode,
};
use fedvc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `per_class` samples of each class with random features.
fn labelled(classes: usize, per_class: usize, dim: usize, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let x = Tensor::matrix(
        n,
        dim,
        (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap();
    let y = (0..n).map(|i| i % classes).collect();
    Dataset::new(x, y, classes).unwrap()
}

fn histogram(ds: &Dataset, indices: impl Iterator<Item = usize>) -> Vec<f64> {
    let mut h = vec![0.0; ds.num_classes()];
    for i in indices {
        h[ds.labels()[i]] += 1.0;
    }
    h
}

fn l1_from_uniform(h: &[f64]) -> f64 {
    let total: f64 = h.iter().sum();
    h.iter()
        .map(|v| (v / total - 1.0 / h.len() as f64).abs())
        .sum()
}

fn group_histograms(ds: &Dataset, p: &ClientPartition) -> Vec<Vec<f64>> {
    (0..p.num_groups)
        .map(|g| {
            histogram(
                ds,
                p.clients
                    .iter()
                    .filter(|c| c.group == g)
                    .flat_map(|c| c.train.iter().chain(&c.test).copied()),
            )
        })
        .collect()
}

#[test]
fn huge_concentration_gives_near_uniform_groups() {
    let ds = labelled(10, 300, 2, 0);
    let cfg = ShiftConfig {
        dirichlet_alpha: 1e6,
        ..ShiftConfig::default()
    };
    let p = dirichlet_label_partition(&ds, &cfg, 1).unwrap();
    for (g, h) in group_histograms(&ds, &p).iter().enumerate() {
        let l1 = l1_from_uniform(h);
        assert!(l1 < 0.02, "group {g}: L1 {l1}");
    }
}

/// Each class is dealt to groups by cumulatively rounding the normalised
/// group weights, so per-group class counts follow from the weights alone.
#[test]
fn class_counts_follow_cumulative_rounding() {
    for seed in 0..10 {
        let ds = labelled(6, 50 + 7 * seed as usize, 2, seed);
        let cfg = ShiftConfig {
            num_groups: 4,
            train_groups: 2,
            clients_per_group: 3,
            dirichlet_alpha: 0.5,
            ..ShiftConfig::default()
        };
        let p = dirichlet_label_partition(&ds, &cfg, seed).unwrap();
        let weights = p.group_class_weights.as_ref().unwrap();
        let observed = group_histograms(&ds, &p);
        let class_size = ds.class_histogram();
        for c in 0..ds.num_classes() {
            let n = class_size[c];
            let total: f64 = weights.iter().map(|w| w[c]).sum();
            let mut bounds = vec![0usize];
            let mut cum = 0.0;
            for (g, w) in weights.iter().enumerate() {
                cum += w[c] / total;
                let end = if g + 1 == weights.len() {
                    n
                } else {
                    ((cum * n as f64).round() as usize).min(n)
                };
                bounds.push(end.max(*bounds.last().unwrap()));
            }
            for g in 0..weights.len() {
                assert_eq!(
                    observed[g][c] as usize,
                    bounds[g + 1] - bounds[g],
                    "seed {seed} class {c} group {g}"
                );
            }
        }
    }
}

/// Sample moments of the per-group class weights match the symmetric
/// Dirichlet: mean `1/C` and variance `(1/C)(1 − 1/C)/(Cα + 1)`.
#[test]
fn group_weights_have_dirichlet_moments() {
    let (classes, alpha) = (5usize, 2.0);
    let ds = labelled(classes, 200, 1, 0);
    let cfg = ShiftConfig {
        num_groups: 5,
        train_groups: 1,
        clients_per_group: 1,
        dirichlet_alpha: alpha,
        ..ShiftConfig::default()
    };
    let mut draws = Vec::new();
    for seed in 0..200 {
        let p = dirichlet_label_partition(&ds, &cfg, seed).unwrap();
        for w in p.group_class_weights.unwrap() {
            draws.extend(w);
        }
    }
    let k = classes as f64;
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    let var = draws.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / draws.len() as f64;
    let expect_var = (1.0 / k) * (1.0 - 1.0 / k) / (k * alpha + 1.0);
    assert!(
        (mean - 1.0 / k).abs() < 1e-12,
        "weights are normalised per group"
    );
    assert!(
        (var / expect_var - 1.0).abs() < 0.15,
        "variance {var} vs {expect_var}"
    );

    // Pearson chi-square of the first coordinate against its Beta(α, (C−1)α)
    // marginal, binned at the quintiles of a large reference sample.
    let first: Vec<f64> = draws.iter().step_by(classes).copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let beta = rand_distr::Beta::new(alpha, (k - 1.0) * alpha).unwrap();
    let mut reference: Vec<f64> = (0..100_000)
        .map(|_| rand_distr::Distribution::sample(&beta, &mut rng))
        .collect();
    reference.sort_by(f64::total_cmp);
    let cuts: Vec<f64> = (1..5).map(|q| reference[q * reference.len() / 5]).collect();
    let mut bins = [0.0f64; 5];
    for v in &first {
        bins[cuts.iter().filter(|&&c| *v >= c).count()] += 1.0;
    }
    let expected = first.len() as f64 / 5.0;
    let chi2: f64 = bins.iter().map(|o| (o - expected).powi(2) / expected).sum();
    // 99.9th percentile of chi-square with 4 degrees of freedom.
    assert!(chi2 < 18.47, "chi-square {chi2}, bins {bins:?}");
}

#[test]
fn feature_shift_clients_keep_the_global_label_mix() {
    let ds = labelled(10, 1000, 3, 5);
    let cfg = ShiftConfig {
        mode: ShiftMode::FeatureShift,
        num_groups: 2,
        train_groups: 1,
        clients_per_group: 2,
        held_out_per_group: 1,
        mixed_clients: 1,
        ..ShiftConfig::default()
    };
    let (shifted, p, transforms) = feature_shift_partition(&ds, &cfg, 6).unwrap();
    assert_eq!(transforms.len(), 2);
    assert_eq!(shifted.len(), ds.len());
    for c in &p.clients {
        let h = histogram(&shifted, c.train.iter().chain(&c.test).copied());
        let l1 = l1_from_uniform(&h);
        assert!(l1 < 0.02, "client {}: L1 {l1}", c.id);
    }
    let domains = shifted.domains().unwrap();
    for c in p.clients.iter().filter(|c| c.group < cfg.num_groups) {
        assert!(c
            .train
            .iter()
            .chain(&c.test)
            .all(|&i| domains[i] == c.group));
    }
    let mixed: Vec<_> = p
        .clients
        .iter()
        .filter(|c| c.group == cfg.num_groups)
        .collect();
    assert_eq!(mixed.len(), 1);
    assert!(mixed[0].role == ClientRole::HeldOutTest);
    let seen: std::collections::BTreeSet<usize> =
        mixed[0].train.iter().map(|&i| domains[i]).collect();
    assert_eq!(seen.len(), cfg.num_groups);
}

#[test]
fn local_splits_are_stratified() {
    let ds = labelled(4, 250, 1, 2);
    let p = dirichlet_label_partition(&ds, &ShiftConfig::default(), 3).unwrap();
    for c in &p.clients {
        let n = c.train.len() + c.test.len();
        let expect = (n as f64 * 0.2).round() as usize;
        assert_eq!(c.test.len(), expect.clamp(1, n - 1));
        let all = histogram(&ds, c.train.iter().chain(&c.test).copied());
        let test = histogram(&ds, c.test.iter().copied());
        for (a, t) in all.iter().zip(&test) {
            // Interleaved classes: the test share of each class is within
            // one sample of proportional.
            assert!(
                (t - a * c.test.len() as f64 / n as f64).abs()
                    <= all.iter().filter(|&&v| v > 0.0).count() as f64
            );
        }
    }
}

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden/target_shift_manifest.json")
}

/// Fixed seed, fixed data: the manifest must not drift between releases.
/// Regenerate with `FEDVC_UPDATE_GOLDEN=1` after an intended change.
#[test]
fn partition_manifest_matches_golden_file() {
    let ds = labelled(3, 20, 1, 0);
    let cfg = ShiftConfig {
        num_groups: 3,
        train_groups: 2,
        clients_per_group: 2,
        ..ShiftConfig::default()
    };
    let manifest = dirichlet_label_partition(&ds, &cfg, 42)
        .unwrap()
        .to_manifest();
    if std::env::var_os("FEDVC_UPDATE_GOLDEN").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(golden_path(), &manifest).unwrap();
    }
    let golden = std::fs::read_to_string(golden_path()).expect("golden manifest present");
    assert_eq!(manifest.trim_end(), golden.trim_end());
    let parsed = ClientPartition::from_manifest(&golden).unwrap();
    parsed.validate(ds.len()).unwrap();
}
