use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::tensor::Tensor;

/// Isotropic Gaussian clusters, several per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub clusters_per_class: usize,
    pub dim: usize,
    /// Minimum distance between any two cluster centres.
    pub separation: f64,
    pub num_samples: usize,
    pub noise_std: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            clusters_per_class: 2,
            dim: 32,
            separation: 4.0,
            num_samples: 8000,
            noise_std: 3.0,
        }
    }
}

/// Parameters the samples were drawn from.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeParams {
    pub means: Tensor,
    pub mean_labels: Vec<usize>,
    pub noise_std: f64,
    pub num_classes: usize,
}

impl GenerativeParams {
    /// Bayes rule for equally likely clusters.
    pub fn bayes_predict(&self, x: &[f64]) -> usize {
        let var2 = 2.0 * self.noise_std * self.noise_std;
        let mut log_terms: Vec<Vec<f64>> = vec![Vec::new(); self.num_classes];
        for (k, &label) in self.mean_labels.iter().enumerate() {
            let d2: f64 = x
                .iter()
                .zip(self.means.row_slice(k))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            log_terms[label].push(-d2 / var2);
        }
        let mut best = (0, f64::NEG_INFINITY);
        for (c, terms) in log_terms.iter().enumerate() {
            let v = crate::tensor::kernels::log_sum_exp(terms);
            if v > best.1 {
                best = (c, v);
            }
        }
        best.0
    }
}

fn place_means(rng: &mut ChaCha8Rng, count: usize, dim: usize, separation: f64) -> Vec<Vec<f64>> {
    let mut side = 2.0 * separation * (count as f64).powf(1.0 / dim as f64);
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(count);
    let mut failures = 0;
    while means.len() < count {
        let cand: Vec<f64> = (0..dim)
            .map(|_| rng.random_range(-0.5..0.5) * side)
            .collect();
        let ok = means.iter().all(|m| {
            let d2: f64 = m.iter().zip(&cand).map(|(a, b)| (a - b) * (a - b)).sum();
            d2 >= separation * separation
        });
        if ok {
            means.push(cand);
            failures = 0;
        } else {
            failures += 1;
            if failures > 1000 {
                side *= 1.1;
                failures = 0;
            }
        }
    }
    means
}

pub fn synth_gmm_dataset(spec: &SynthSpec, seed: u64) -> Result<(Dataset, GenerativeParams)> {
    if !(spec.separation > 0.0) || !(spec.noise_std > 0.0) {
        return Err(DataError::Invalid(
            "separation and noise_std must be positive".into(),
        ));
    }
    if spec.num_classes < 2 || spec.clusters_per_class == 0 || spec.dim == 0 {
        return Err(DataError::Invalid(
            "need ≥2 classes, ≥1 cluster per class and dim ≥ 1".into(),
        ));
    }
    if spec.num_samples < spec.num_classes {
        return Err(DataError::Invalid(format!(
            "{} samples cannot cover {} classes",
            spec.num_samples, spec.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = spec.num_classes * spec.clusters_per_class;
    let means = place_means(&mut rng, k, spec.dim, spec.separation);
    let mean_labels: Vec<usize> = (0..k).map(|c| c / spec.clusters_per_class).collect();

    let mut clusters: Vec<usize> = (0..spec.num_samples).map(|i| i % k).collect();
    clusters.shuffle(&mut rng);
    let mut features = Vec::with_capacity(spec.num_samples * spec.dim);
    let mut labels = Vec::with_capacity(spec.num_samples);
    for &c in &clusters {
        for &mu in &means[c] {
            let eps: f64 = StandardNormal.sample(&mut rng);
            features.push(mu + spec.noise_std * eps);
        }
        labels.push(mean_labels[c]);
    }
    let ds = Dataset::new(
        Tensor::matrix(spec.num_samples, spec.dim, features)?,
        labels,
        spec.num_classes,
    )?;
    let flat: Vec<f64> = means.into_iter().flatten().collect();
    let params = GenerativeParams {
        means: Tensor::matrix(k, spec.dim, flat)?,
        mean_labels,
        noise_std: spec.noise_std,
        num_classes: spec.num_classes,
    };
    Ok((ds, params))
}
