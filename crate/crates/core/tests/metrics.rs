//! Classification and clustering metrics against direct definitions.

use fedvc::metrics::{
    accuracy, adjusted_rand_index, kmeans, mean_std, preference_cluster_agreement,
    project_preferences, read_metrics_csv, read_projections_csv, silhouette, weighted_auc,
    weighted_f1, write_metrics_csv, write_projections_csv, MetricsRecord, ProjectionDump,
    ProjectionPoint, Split,
};
use fedvc::tensor::Tensor;
use proptest::prelude::*;

/// ARI from pair counts over all `n(n−1)/2` pairs.
fn ari_by_pairs(a: &[usize], b: &[usize]) -> f64 {
    let (mut both, mut only_a, mut only_b, mut neither) = (0.0, 0.0, 0.0, 0.0);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => both += 1.0,
                (true, false) => only_a += 1.0,
                (false, true) => only_b += 1.0,
                (false, false) => neither += 1.0,
            }
        }
    }
    let denom = (both + only_a) * (only_a + neither) + (both + only_b) * (only_b + neither);
    if denom == 0.0 {
        return 1.0;
    }
    2.0 * (both * neither - only_a * only_b) / denom
}

/// One-vs-rest AUC by comparing every positive with every negative.
fn auc_by_pairs(scores: &Tensor, labels: &[usize]) -> f64 {
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..scores.cols() {
        let pos: Vec<f64> = (0..labels.len())
            .filter(|&i| labels[i] == c)
            .map(|i| scores.get2(i, c))
            .collect();
        let neg: Vec<f64> = (0..labels.len())
            .filter(|&i| labels[i] != c)
            .map(|i| scores.get2(i, c))
            .collect();
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        let mut wins = 0.0;
        for p in &pos {
            for q in &neg {
                wins += if p > q {
                    1.0
                } else if p == q {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total += pos.len() as f64 / n * wins / (pos.len() * neg.len()) as f64;
    }
    total
}

fn silhouette_by_definition(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let dist = |i: usize, j: usize| -> f64 {
        points[i]
            .iter()
            .zip(&points[j])
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let clusters: std::collections::BTreeSet<usize> = labels.iter().copied().collect();
    let mut total = 0.0;
    for i in 0..points.len() {
        let same: Vec<usize> = (0..points.len())
            .filter(|&j| j != i && labels[j] == labels[i])
            .collect();
        if same.is_empty() {
            continue;
        }
        let a = same.iter().map(|&j| dist(i, j)).sum::<f64>() / same.len() as f64;
        let b = clusters
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| {
                let members: Vec<usize> = (0..points.len()).filter(|&j| labels[j] == c).collect();
                members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / points.len() as f64
}

#[test]
fn silhouette_of_two_pairs_on_a_line() {
    let points = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![10.0], vec![11.0]]).unwrap();
    let expect = (9.5 / 10.5 + 8.5 / 9.5) / 2.0;
    assert!((silhouette(&points, &[0, 0, 1, 1]).unwrap() - expect).abs() < 1e-12);
}

#[test]
fn weighted_f1_hand_example() {
    // Class 0: P = 2/3, R = 1, F1 = 0.8 (support 2).
    // Class 1: P = 1/2, R = 1/2, F1 = 0.5 (support 2).
    // Class 2: P = 0, R = 0, F1 = 0 (support 1).
    let preds = [0, 0, 1, 0, 1];
    let labels = [0, 0, 1, 1, 2];
    let expect = (2.0 * 0.8 + 2.0 * 0.5) / 5.0;
    assert!((weighted_f1(&preds, &labels).unwrap() - expect).abs() < 1e-12);
    assert!((accuracy(&preds, &labels).unwrap() - 0.6).abs() < 1e-12);
}

#[test]
fn kmeans_is_deterministic_under_seed() {
    let rows: Vec<Vec<f64>> = (0..40)
        .map(|i| {
            vec![
                (i % 4) as f64 * 5.0 + (i as f64 * 0.37).sin(),
                (i as f64).cos(),
            ]
        })
        .collect();
    let points = Tensor::from_rows(&rows).unwrap();
    let a = kmeans(&points, 4, 3).unwrap();
    let b = kmeans(&points, 4, 3).unwrap();
    assert_eq!(a, b);
    let groups: Vec<usize> = (0..40).map(|i| i % 4).collect();
    assert!((preference_cluster_agreement(&points, &groups, 3).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn projection_recovers_a_planar_layout() {
    // Points on a plane embedded in 3-D: the projection preserves all
    // pairwise distances.
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|i| {
            let (u, v) = ((i as f64 * 1.3).sin() * 3.0, (i as f64 * 0.7).cos());
            vec![u + v, u - v, 2.0 * v]
        })
        .collect();
    let proj = project_preferences(&Tensor::from_rows(&rows).unwrap()).unwrap();
    for i in 0..rows.len() {
        for j in 0..rows.len() {
            let d3: f64 = rows[i]
                .iter()
                .zip(&rows[j])
                .map(|(a, b)| (a - b).powi(2))
                .sum();
            let d2 = (proj[i][0] - proj[j][0]).powi(2) + (proj[i][1] - proj[j][1]).powi(2);
            assert!((d3 - d2).abs() < 1e-9);
        }
    }
}

#[test]
fn projections_csv_round_trip() {
    let dumps = vec![
        ProjectionDump {
            run_id: "a".into(),
            round: 0,
            points: vec![
                ProjectionPoint {
                    sample_id: 3,
                    group_id: 1,
                    x: 0.25,
                    y: -1.5,
                },
                ProjectionPoint {
                    sample_id: 7,
                    group_id: 0,
                    x: 1e-17,
                    y: 3.0,
                },
            ],
        },
        ProjectionDump {
            run_id: "a".into(),
            round: 5,
            points: vec![ProjectionPoint {
                sample_id: 3,
                group_id: 1,
                x: 2.0,
                y: 0.1,
            }],
        },
    ];
    let mut buf = Vec::new();
    write_projections_csv(&mut buf, &dumps).unwrap();
    assert_eq!(read_projections_csv(&buf[..]).unwrap(), dumps);
}

#[test]
fn mean_std_is_population_std() {
    let (m, s) = mean_std(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(m, 2.5);
    assert!((s - 1.25f64.sqrt()).abs() < 1e-15);
}

fn labels_strategy(n: usize, k: usize) -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(0..k, n)
}

fn record() -> impl Strategy<Value = MetricsRecord> {
    (
        "[a-z0-9_=.]{1,12}",
        0usize..1000,
        prop::sample::select(vec!["fedavg", "fedvc_em", "local_only"]),
        0usize..100,
        0usize..10,
        prop::sample::select(vec!["train_participant", "held_out_test"]),
        any::<bool>(),
        (0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0),
    )
        .prop_map(
            |(run_id, round, strategy, client_id, group_id, role, test, (a, u, f))| MetricsRecord {
                run_id,
                round,
                strategy: strategy.into(),
                client_id,
                group_id,
                role: role.into(),
                split: if test {
                    Split::LocalTest
                } else {
                    Split::LocalTrain
                },
                accuracy: a,
                weighted_auc: u,
                weighted_f1: f,
            },
        )
}

proptest! {
    #[test]
    fn ari_matches_pair_counting(a in labels_strategy(30, 4), b in labels_strategy(30, 5)) {
        let fast = adjusted_rand_index(&a, &b).unwrap();
        prop_assert!((fast - ari_by_pairs(&a, &b)).abs() < 1e-9);
        prop_assert!((fast - adjusted_rand_index(&b, &a).unwrap()).abs() < 1e-12);
        let renamed: Vec<usize> = a.iter().map(|&l| 7 - l).collect();
        prop_assert!((fast - adjusted_rand_index(&renamed, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_pairwise_comparison(
        raw in prop::collection::vec(0u8..6, 60),
        labels in labels_strategy(20, 3),
    ) {
        // Coarse scores so that ties occur.
        let scores = Tensor::matrix(20, 3, raw.iter().map(|&v| v as f64 / 5.0).collect()).unwrap();
        let present = labels.iter().collect::<std::collections::BTreeSet<_>>().len();
        prop_assume!(present >= 2);
        let fast = weighted_auc(&scores, &labels).unwrap();
        prop_assert!((fast - auc_by_pairs(&scores, &labels)).abs() < 1e-9);
        let shifted = scores.map(|v| (3.0 * v).exp() - 2.0);
        prop_assert!((fast - weighted_auc(&shifted, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn f1_and_accuracy_bounds(preds in labels_strategy(25, 4), labels in labels_strategy(25, 4)) {
        let f1 = weighted_f1(&preds, &labels).unwrap();
        let acc = accuracy(&preds, &labels).unwrap();
        prop_assert!((0.0..=1.0).contains(&f1));
        prop_assert!((0.0..=1.0).contains(&acc));
        prop_assert!((weighted_f1(&labels, &labels).unwrap() - 1.0).abs() < 1e-12);
        prop_assert_eq!(acc == 1.0, preds == labels);
        let mut order: Vec<usize> = (0..25).collect();
        order.reverse();
        let p2: Vec<usize> = order.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = order.iter().map(|&i| labels[i]).collect();
        prop_assert!((weighted_f1(&p2, &l2).unwrap() - f1).abs() < 1e-12);
    }

    #[test]
    fn silhouette_matches_definition(
        coords in prop::collection::vec(-5.0f64..5.0, 24),
        labels in labels_strategy(12, 3),
    ) {
        prop_assume!(labels.iter().collect::<std::collections::BTreeSet<_>>().len() >= 2);
        let rows: Vec<Vec<f64>> = coords.chunks(2).map(<[f64]>::to_vec).collect();
        let fast = silhouette(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
        prop_assert!((fast - silhouette_by_definition(&rows, &labels)).abs() < 1e-9);
        prop_assert!((-1.0..=1.0).contains(&fast));
    }

    #[test]
    fn metrics_csv_round_trip(records in prop::collection::vec(record(), 0..20)) {
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &records, true).unwrap();
        prop_assert_eq!(read_metrics_csv(&buf[..]).unwrap(), records);
    }
}
