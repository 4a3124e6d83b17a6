//! EM statistics: batch monotonicity, streaming equivalence and merging.

mod common;

use common::{rand_simplex, rand_tensor};
use fedvc::concepts::{
    em_m_step, gmm_log_likelihood, merge_concepts, relevance, ConceptBank, StreamStats,
};
use fedvc::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Responsibilities are GMM posteriors under unit covariance when `ι = 1/2`.
const POSTERIOR_IOTA: f64 = 0.5;

struct Problem {
    embeddings: Vec<Tensor>,
    upsilon: Vec<Vec<f64>>,
    concepts: Tensor,
}

fn problem(seed: u64, clients: usize, m: usize, d: usize) -> Problem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let embeddings = (0..clients)
        .map(|_| {
            let n = rng.random_range(5..20);
            rand_tensor(&mut rng, n, d, 2.0)
        })
        .collect();
    Problem {
        embeddings,
        upsilon: (0..clients).map(|_| rand_simplex(&mut rng, m)).collect(),
        concepts: rand_tensor(&mut rng, m, d, 1.0),
    }
}

fn responsibilities(p: &Problem, concepts: &Tensor) -> Vec<Tensor> {
    let bank = ConceptBank::new(concepts.clone(), POSTERIOR_IOTA).unwrap();
    p.embeddings
        .iter()
        .zip(&p.upsilon)
        .map(|(z, u)| relevance(z, &bank, u).unwrap())
        .collect()
}

fn log_likelihood(p: &Problem, upsilon: &[Vec<f64>], concepts: &Tensor) -> f64 {
    let pairs: Vec<(&Tensor, &[f64])> = p
        .embeddings
        .iter()
        .zip(upsilon)
        .map(|(z, u)| (z, u.as_slice()))
        .collect();
    gmm_log_likelihood(&pairs, concepts).unwrap()
}

#[test]
fn batch_em_never_decreases_log_likelihood() {
    let mut instance = 0;
    for m in [2, 3] {
        for d in [2, 5] {
            for rep in 0..13 {
                let mut p = problem(100 * m as u64 + 10 * d as u64 + rep, 3, m, d);
                let mut previous = log_likelihood(&p, &p.upsilon, &p.concepts);
                for step in 0..30 {
                    let s = responsibilities(&p, &p.concepts);
                    let pairs: Vec<(&Tensor, &Tensor)> = s.iter().zip(&p.embeddings).collect();
                    let update = em_m_step(&pairs, &p.concepts).unwrap();
                    let current = log_likelihood(&p, &update.upsilon, &update.concepts);
                    assert!(
                        current >= previous - 1e-9,
                        "m={m} d={d} rep={rep} step={step}: {previous} -> {current}"
                    );
                    previous = current;
                    p.upsilon = update.upsilon;
                    p.concepts = update.concepts;
                }
                instance += 1;
            }
        }
    }
    assert!(instance >= 50);
}

#[test]
fn one_batch_without_memory_matches_batch_em() {
    for seed in 0..20 {
        let p = problem(seed, 1, 3, 4);
        let bank = ConceptBank::new(p.concepts.clone(), POSTERIOR_IOTA).unwrap();
        let s = responsibilities(&p, &p.concepts).remove(0);
        let z = &p.embeddings[0];

        let mut stats = StreamStats::new(&bank, 0.0).unwrap();
        stats.accumulate(&s, z).unwrap();
        let batch = em_m_step(&[(&s, z)], &p.concepts).unwrap();

        let upsilon = stats.finalize_upsilon().unwrap();
        for (a, b) in upsilon.iter().zip(&batch.upsilon[0]) {
            assert!((a - b).abs() < 1e-9);
        }
        let merged = merge_concepts(&[&stats], &p.concepts).unwrap();
        for (a, b) in merged.data().iter().zip(batch.concepts.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}

/// The server merge equals the pooled M-step over all clients' samples.
#[test]
fn merge_matches_pooled_m_step() {
    for seed in 0..20 {
        let p = problem(500 + seed, 3, 3, 2);
        let bank = ConceptBank::new(p.concepts.clone(), POSTERIOR_IOTA).unwrap();
        let s = responsibilities(&p, &p.concepts);
        let stats: Vec<StreamStats> = s
            .iter()
            .zip(&p.embeddings)
            .map(|(s, z)| {
                let mut st = StreamStats::new(&bank, 0.0).unwrap();
                st.accumulate(s, z).unwrap();
                st
            })
            .collect();
        let refs: Vec<&StreamStats> = stats.iter().collect();
        let merged = merge_concepts(&refs, &p.concepts).unwrap();

        let (m, d) = (3, 2);
        let mut mass = vec![0.0; m];
        let mut sums = vec![0.0; m * d];
        for (s, z) in s.iter().zip(&p.embeddings) {
            for i in 0..z.rows() {
                for k in 0..m {
                    mass[k] += s.get2(i, k);
                    for t in 0..d {
                        sums[k * d + t] += s.get2(i, k) * z.get2(i, t);
                    }
                }
            }
        }
        for k in 0..m {
            for t in 0..d {
                assert!((merged.get2(k, t) - sums[k * d + t] / mass[k]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn concepts_without_mass_keep_their_previous_value() {
    let previous = Tensor::from_rows(&[vec![1.0, 2.0], vec![-3.0, 4.0]]).unwrap();
    let st = StreamStats::from_parts(
        vec![2.0, 0.0],
        Tensor::from_rows(&[vec![4.0, 6.0], vec![0.0, 0.0]]).unwrap(),
        2.0,
        0.0,
    )
    .unwrap();
    let merged = merge_concepts(&[&st], &previous).unwrap();
    assert_eq!(merged.row_slice(0), &[2.0, 3.0]);
    assert_eq!(merged.row_slice(1), &[-3.0, 4.0]);
}

/// After `n` identical batches the moving average is
/// `κⁿ·initial + (1 − κⁿ)·batch`.
#[test]
fn moving_average_has_closed_form() {
    let p = problem(9, 1, 3, 3);
    let bank = ConceptBank::new(p.concepts.clone(), POSTERIOR_IOTA).unwrap();
    let s = responsibilities(&p, &p.concepts).remove(0);
    let z = &p.embeddings[0];
    let kappa: f64 = 0.05;
    let initial = StreamStats::new(&bank, kappa).unwrap();
    let mut stats = initial.clone();
    let batch = {
        let mut b = StreamStats::new(&bank, 0.0).unwrap();
        b.accumulate(&s, z).unwrap();
        b
    };
    for n in 1..=50 {
        stats.accumulate(&s, z).unwrap();
        let decay = kappa.powi(n);
        for (k, v) in stats.mass().iter().enumerate() {
            let expect = decay * initial.mass()[k] + (1.0 - decay) * batch.mass()[k];
            assert!((v - expect).abs() < 1e-9);
        }
        let expect = decay * initial.count() + (1.0 - decay) * batch.count();
        assert!((stats.count() - expect).abs() < 1e-9);
    }
    let streamed = stats.finalize_upsilon().unwrap();
    let reference = em_m_step(&[(&s, z)], &p.concepts)
        .unwrap()
        .upsilon
        .remove(0);
    let l1: f64 = streamed
        .iter()
        .zip(&reference)
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(l1 < 0.05, "L1 distance {l1}");
}

/// With long memory, streaming over shuffled minibatches tracks the
/// full-batch weights.
#[test]
fn minibatch_streaming_tracks_batch_weights() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let concepts = Tensor::from_rows(&[vec![-2.0, 0.0], vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
    let bank = ConceptBank::new(concepts.clone(), POSTERIOR_IOTA).unwrap();
    let upsilon = vec![0.5, 0.3, 0.2];
    let mut rows = Vec::new();
    for _ in 0..400 {
        let k = match rng.random::<f64>() {
            u if u < 0.5 => 0,
            u if u < 0.8 => 1,
            _ => 2,
        };
        rows.push(vec![
            concepts.get2(k, 0) + common::normal(&mut rng),
            concepts.get2(k, 1) + common::normal(&mut rng),
        ]);
    }
    let z = Tensor::from_rows(&rows).unwrap();
    let s = relevance(&z, &bank, &upsilon).unwrap();
    let reference = em_m_step(&[(&s, &z)], &concepts).unwrap().upsilon.remove(0);

    let mut stats = StreamStats::new(&bank, 0.9).unwrap();
    for pass in 0..50 {
        let mut order: Vec<usize> = (0..400).collect();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
        for chunk in order.chunks(100) {
            stats
                .accumulate(
                    &s.select_rows(chunk).unwrap(),
                    &z.select_rows(chunk).unwrap(),
                )
                .unwrap();
        }
        if pass == 49 {
            let streamed = stats.finalize_upsilon().unwrap();
            let l1: f64 = streamed
                .iter()
                .zip(&reference)
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(l1 < 0.05, "L1 distance {l1}");
        }
    }
}
