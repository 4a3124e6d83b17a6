use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MetricsError, Result};
use crate::concepts::kmeans_pp_seeds;
use crate::tensor::Tensor;

const KMEANS_RESTARTS: usize = 10;
const KMEANS_MAX_ITERS: usize = 200;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Projects rows onto the top two principal axes of the centred data.
///
/// Each axis is oriented so its largest-magnitude component is positive.
/// Data with zero variance projects to the origin.
pub fn project_preferences(points: &Tensor) -> Result<Vec<[f64; 2]>> {
    let (n, d) = points
        .dims2("project_preferences")
        .map_err(|e| MetricsError::Invalid(e.to_string()))?;
    if n < 2 || d < 2 {
        return Err(MetricsError::Invalid(format!(
            "projection needs at least 2 samples of dimension >= 2, got {n}x{d}"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, points.data());
    let mean = x.row_mean();
    let mut centred = x;
    for mut row in centred.row_iter_mut() {
        row -= &mean;
    }
    let cov = centred.transpose() * &centred / n as f64;
    if cov.iter().all(|v| v.abs() < 1e-300) {
        return Ok(vec![[0.0, 0.0]; n]);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });
    let mut axes = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut v = eig.eigenvectors.column(k).into_owned();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |m, c| if c.abs() > m.abs() { c } else { m });
        if lead < 0.0 {
            v = -v;
        }
        axes.push(v);
    }
    Ok((0..n)
        .map(|i| {
            let row = centred.row(i);
            [row.dot(&axes[0].transpose()), row.dot(&axes[1].transpose())]
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansFit {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
}

fn lloyd(points: &Tensor, mut centroids: Tensor) -> KMeansFit {
    let (n, d) = (points.rows(), points.cols());
    let k = centroids.rows();
    let mut assignments = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let p = points.row_slice(i);
            let mut best = (0, f64::INFINITY);
            for c in 0..k {
                let dist = sq_dist(p, centroids.row_slice(c));
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            if *a != best.0 {
                *a = best.0;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * d..(a + 1) * d].iter_mut().zip(points.row_slice(i)) {
                *s += v;
            }
        }
        for c in (0..k).filter(|&c| counts[c] > 0) {
            for (dst, s) in centroids
                .row_slice_mut(c)
                .iter_mut()
                .zip(&sums[c * d..(c + 1) * d])
            {
                *dst = s / counts[c] as f64;
            }
        }
    }
    let inertia = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row_slice(i), centroids.row_slice(a)))
        .sum();
    KMeansFit {
        assignments,
        centroids,
        inertia,
    }
}

/// Lloyd's algorithm from k-means++ seeds; the lowest-inertia fit of ten
/// restarts is returned.
pub fn kmeans(points: &Tensor, k: usize, seed: u64) -> Result<KMeansFit> {
    if points.rows() < k || k == 0 {
        return Err(MetricsError::Invalid(format!(
            "cannot form {k} clusters from {} points",
            points.rows()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<KMeansFit> = None;
    for _ in 0..KMEANS_RESTARTS {
        let seeds = kmeans_pp_seeds(points, k, &mut rng)
            .map_err(|e| MetricsError::Invalid(e.to_string()))?;
        let fit = lloyd(points, seeds);
        if best.as_ref().is_none_or(|b| fit.inertia < b.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}

fn comb2(n: usize) -> f64 {
    let n = n as f64;
    n * (n - 1.0) / 2.0
}

fn relabel(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::BTreeMap::new();
    let out = labels
        .iter()
        .map(|l| {
            let next = map.len();
            *map.entry(*l).or_insert(next)
        })
        .collect();
    (out, map.len())
}

/// Adjusted Rand index from the contingency table of two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.is_empty() {
        return Err(MetricsError::Empty("adjusted_rand_index"));
    }
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch {
            op: "adjusted_rand_index",
            left: a.len(),
            right: b.len(),
        });
    }
    let (a, ka) = relabel(a);
    let (b, kb) = relabel(b);
    let mut table = vec![0usize; ka * kb];
    for (&i, &j) in a.iter().zip(&b) {
        table[i * kb + j] += 1;
    }
    let index: f64 = table.iter().map(|&v| comb2(v)).sum();
    let rows: f64 = (0..ka)
        .map(|i| comb2(table[i * kb..(i + 1) * kb].iter().sum()))
        .sum();
    let cols: f64 = (0..kb)
        .map(|j| comb2((0..ka).map(|i| table[i * kb + j]).sum()))
        .sum();
    let expected = rows * cols / comb2(a.len()).max(1.0);
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Mean silhouette coefficient; singleton clusters score 0.
pub fn silhouette(points: &Tensor, labels: &[usize]) -> Result<f64> {
    let n = points.rows();
    if labels.len() != n {
        return Err(MetricsError::LengthMismatch {
            op: "silhouette",
            left: n,
            right: labels.len(),
        });
    }
    let (labels, k) = relabel(labels);
    if k < 2 {
        return Err(MetricsError::Invalid(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let mut sizes = vec![0usize; k];
    for &l in &labels {
        sizes[l] += 1;
    }
    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..n {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for j in 0..n {
            sums[labels[j]] += sq_dist(points.row_slice(i), points.row_slice(j)).sqrt();
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / n as f64)
}

/// ARI between k-means clusters of `points` (k = number of distinct groups)
/// and the ground-truth `groups`.
pub fn preference_cluster_agreement(points: &Tensor, groups: &[usize], seed: u64) -> Result<f64> {
    let (_, k) = relabel(groups);
    if k < 2 {
        return Err(MetricsError::Invalid(
            "cluster agreement needs at least two groups".into(),
        ));
    }
    let fit = kmeans(points, k, seed)?;
    let (_, found) = relabel(&fit.assignments);
    if found < 2 {
        return Err(MetricsError::Invalid(
            "k-means collapsed to a single cluster".into(),
        ));
    }
    adjusted_rand_index(&fit.assignments, groups)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ari_of_identical_and_relabelled() {
        assert_eq!(
            adjusted_rand_index(&[0, 0, 1, 1], &[5, 5, 2, 2]).unwrap(),
            1.0
        );
        let v = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn pca_rank_one_second_axis_zero() {
        let pts = Tensor::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![1.0, 2.0, 3.0],
            vec![2.0, 4.0, 6.0],
        ])
        .unwrap();
        let proj = project_preferences(&pts).unwrap();
        for p in &proj {
            assert!(p[1].abs() < 1e-9);
        }
        assert!((proj[2][0] - proj[0][0] - 2.0 * 14f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn pca_zero_variance() {
        let pts = Tensor::full(&[3, 2], 1.5);
        assert_eq!(project_preferences(&pts).unwrap(), vec![[0.0, 0.0]; 3]);
    }

    #[test]
    fn kmeans_finds_obvious_clusters() {
        let pts = Tensor::from_rows(&[
            vec![0.0, 0.0],
            vec![0.1, 0.0],
            vec![10.0, 10.0],
            vec![10.1, 10.0],
        ])
        .unwrap();
        let fit = kmeans(&pts, 2, 0).unwrap();
        assert_eq!(fit.assignments[0], fit.assignments[1]);
        assert_ne!(fit.assignments[0], fit.assignments[2]);
        assert!(fit.inertia < 0.02);
    }

    #[test]
    fn agreement_rejects_single_group() {
        let pts = Tensor::zeros(&[3, 2]);
        assert!(preference_cluster_agreement(&pts, &[1, 1, 1], 0).is_err());
    }
}
