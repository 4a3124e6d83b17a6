//! Virtual concepts and the federated Gaussian mixture over embeddings.
//!
//! Each client `k` models its embeddings as `Σ_m υ_m N(z; c_m, I)` with a
//! shared concept matrix `C` (`M × d`) and a private weight vector `υ`.
//! Full-batch EM and the streaming moving-average variant used during
//! minibatch training both live here.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::tensor::{kernels, Tensor, TensorError};

/// Concepts whose total responsibility falls below this keep their value.
pub const DEAD_CONCEPT_MASS: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum ConceptError {
    #[error("concept weights must be finite, non-negative and sum to 1 (sum = {sum})")]
    InvalidUpsilon { sum: f64 },
    #[error("concept weights are all zero")]
    ZeroUpsilon,
    #[error("expected {expected} values, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("no data")]
    EmptyData,
    #[error("similarity sharpness must be positive and finite, got {0}")]
    InvalidIota(f64),
    #[error("smoothing must lie in [0, 1], got {0}")]
    InvalidKappa(f64),
    #[error("effective sample count is zero")]
    ZeroCount,
    #[error("concept matrix must be finite")]
    NonFinite,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = ConceptError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptBank {
    concepts: Tensor,
    iota: f64,
}

impl ConceptBank {
    pub fn new(concepts: Tensor, iota: f64) -> Result<Self> {
        concepts.dims2("concept bank")?;
        if !concepts.is_finite() {
            return Err(ConceptError::NonFinite);
        }
        if !(iota.is_finite() && iota > 0.0) {
            return Err(ConceptError::InvalidIota(iota));
        }
        Ok(Self { concepts, iota })
    }

    /// Concepts drawn from `0.1 · N(0, I)`.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, num: usize, dim: usize, iota: f64) -> Result<Self> {
        let data = (0..num * dim)
            .map(|_| 0.1 * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect::<Vec<f64>>();
        Self::new(Tensor::matrix(num, dim, data)?, iota)
    }

    pub fn num_concepts(&self) -> usize {
        self.concepts.rows()
    }

    pub fn dim(&self) -> usize {
        self.concepts.cols()
    }

    pub fn iota(&self) -> f64 {
        self.iota
    }

    pub fn concepts(&self) -> &Tensor {
        &self.concepts
    }

    pub fn concept(&self, m: usize) -> &[f64] {
        self.concepts.row_slice(m)
    }

    pub fn set_concepts(&mut self, concepts: Tensor) -> Result<()> {
        if concepts.shape() != self.concepts.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "set_concepts",
                lhs: self.concepts.shape().to_vec(),
                rhs: concepts.shape().to_vec(),
            }
            .into());
        }
        if !concepts.is_finite() {
            return Err(ConceptError::NonFinite);
        }
        self.concepts = concepts;
        Ok(())
    }
}

pub fn uniform_upsilon(num: usize) -> Vec<f64> {
    vec![1.0 / num as f64; num]
}

pub fn validate_upsilon(upsilon: &[f64], num: usize) -> Result<()> {
    if upsilon.len() != num {
        return Err(ConceptError::LengthMismatch {
            expected: num,
            got: upsilon.len(),
        });
    }
    let sum: f64 = upsilon.iter().sum();
    if upsilon.iter().all(|&u| u == 0.0) {
        return Err(ConceptError::ZeroUpsilon);
    }
    if upsilon.iter().any(|u| !u.is_finite() || *u < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(ConceptError::InvalidUpsilon { sum });
    }
    Ok(())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per-sample responsibilities
/// `s_im = υ_m exp(−ι‖z_i − c_m‖²) / Σ_m' υ_m' exp(−ι‖z_i − c_m'‖²)`,
/// evaluated in log space. Returns a `B × M` row-stochastic matrix.
pub fn relevance(z: &Tensor, bank: &ConceptBank, upsilon: &[f64]) -> Result<Tensor> {
    let (b, d) = z.dims2("relevance")?;
    let m = bank.num_concepts();
    if d != bank.dim() {
        return Err(ConceptError::LengthMismatch {
            expected: bank.dim(),
            got: d,
        });
    }
    validate_upsilon(upsilon, m)?;
    let log_u: Vec<f64> = upsilon.iter().map(|u| u.ln()).collect();
    let mut out = vec![0.0; b * m];
    for i in 0..b {
        let zi = z.row_slice(i);
        let row = &mut out[i * m..(i + 1) * m];
        for (k, slot) in row.iter_mut().enumerate() {
            *slot = log_u[k] - bank.iota * squared_distance(zi, bank.concept(k));
        }
        kernels::softmax_in_place(row);
    }
    Ok(Tensor::matrix(b, m, out)?)
}

/// `Σ_m w_m c_m` for a weight vector over concepts.
fn weighted_concepts(weights: &[f64], bank: &ConceptBank) -> Result<Vec<f64>> {
    let m = bank.num_concepts();
    if weights.len() != m {
        return Err(ConceptError::LengthMismatch {
            expected: m,
            got: weights.len(),
        });
    }
    let mut p = vec![0.0; bank.dim()];
    for (k, &w) in weights.iter().enumerate() {
        for (pv, cv) in p.iter_mut().zip(bank.concept(k)) {
            *pv += w * cv;
        }
    }
    Ok(p)
}

/// Client preference `p = Σ_m υ_m c_m`.
pub fn client_preference(upsilon: &[f64], bank: &ConceptBank) -> Result<Vec<f64>> {
    validate_upsilon(upsilon, bank.num_concepts())?;
    weighted_concepts(upsilon, bank)
}

/// Estimated preference `p̂ = Σ_m s_m c_m` for one responsibility row.
pub fn estimated_preference(s_row: &[f64], bank: &ConceptBank) -> Result<Vec<f64>> {
    validate_upsilon(s_row, bank.num_concepts())?;
    weighted_concepts(s_row, bank)
}

/// Row-wise [`estimated_preference`] for a `B × M` responsibility matrix.
pub fn estimated_preferences(s: &Tensor, bank: &ConceptBank) -> Result<Tensor> {
    let (_, m) = s.dims2("estimated_preferences")?;
    if m != bank.num_concepts() {
        return Err(ConceptError::LengthMismatch {
            expected: bank.num_concepts(),
            got: m,
        });
    }
    Ok(s.matmul(bank.concepts())?)
}

/// A client's concept weights together with the derived preference.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientPreference {
    upsilon: Vec<f64>,
    preference: Vec<f64>,
}

impl ClientPreference {
    pub fn new(upsilon: Vec<f64>, bank: &ConceptBank) -> Result<Self> {
        let preference = client_preference(&upsilon, bank)?;
        Ok(Self {
            upsilon,
            preference,
        })
    }

    pub fn uniform(bank: &ConceptBank) -> Self {
        Self::new(uniform_upsilon(bank.num_concepts()), bank).expect("uniform weights are valid")
    }

    pub fn upsilon(&self) -> &[f64] {
        &self.upsilon
    }

    pub fn preference(&self) -> &[f64] {
        &self.preference
    }
}

/// `Σ_k Σ_i log Σ_m υ_m^{(k)} N(z_i; c_m, I)` over every client's
/// embeddings.
pub fn gmm_log_likelihood(clients: &[(&Tensor, &[f64])], concepts: &Tensor) -> Result<f64> {
    let (m, d) = concepts.dims2("gmm_log_likelihood")?;
    if clients.iter().all(|(z, _)| z.is_empty()) {
        return Err(ConceptError::EmptyData);
    }
    let norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    let mut terms = vec![0.0; m];
    for (z, upsilon) in clients {
        validate_upsilon(upsilon, m)?;
        let (b, zd) = z.dims2("gmm_log_likelihood")?;
        if zd != d {
            return Err(ConceptError::LengthMismatch {
                expected: d,
                got: zd,
            });
        }
        for i in 0..b {
            let zi = z.row_slice(i);
            for (k, t) in terms.iter_mut().enumerate() {
                *t = upsilon[k].ln() - 0.5 * squared_distance(zi, concepts.row_slice(k));
            }
            total += norm + kernels::log_sum_exp(&terms);
        }
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub upsilon: Vec<Vec<f64>>,
    pub concepts: Tensor,
}

/// Batch M-step over every client's responsibilities and embeddings.
/// Concepts with (near) zero total responsibility keep `previous`.
pub fn em_m_step(clients: &[(&Tensor, &Tensor)], previous: &Tensor) -> Result<MStep> {
    let (m, d) = previous.dims2("em_m_step")?;
    let mut mass = vec![0.0; m];
    let mut sums = vec![0.0; m * d];
    let mut upsilon = Vec::with_capacity(clients.len());
    for (s, z) in clients {
        let (b, sm) = s.dims2("em_m_step")?;
        let (bz, zd) = z.dims2("em_m_step")?;
        if sm != m || zd != d || b != bz {
            return Err(TensorError::ShapeMismatch {
                op: "em_m_step",
                lhs: s.shape().to_vec(),
                rhs: z.shape().to_vec(),
            }
            .into());
        }
        let mut u = vec![0.0; m];
        for i in 0..b {
            let si = s.row_slice(i);
            let zi = z.row_slice(i);
            for k in 0..m {
                u[k] += si[k];
                mass[k] += si[k];
                for t in 0..d {
                    sums[k * d + t] += si[k] * zi[t];
                }
            }
        }
        u.iter_mut().for_each(|v| *v /= b as f64);
        upsilon.push(u);
    }
    if clients.is_empty() {
        return Err(ConceptError::EmptyData);
    }
    let concepts = ratio_or_previous(&sums, &mass, previous)?;
    Ok(MStep { upsilon, concepts })
}

fn ratio_or_previous(sums: &[f64], mass: &[f64], previous: &Tensor) -> Result<Tensor> {
    let (m, d) = previous.dims2("concept update")?;
    let mut out = previous.data().to_vec();
    for k in 0..m {
        if mass[k] >= DEAD_CONCEPT_MASS {
            for t in 0..d {
                out[k * d + t] = sums[k * d + t] / mass[k];
            }
        }
    }
    Ok(Tensor::matrix(m, d, out)?)
}

/// Exponential moving averages of concept mass `S`, responsibility-weighted
/// embedding sums and the effective sample count `N`.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamStats {
    mass: Vec<f64>,
    weighted_sum: Tensor,
    count: f64,
    kappa: f64,
}

impl StreamStats {
    /// Starts from a pseudo-count of one sample spread uniformly over the
    /// concepts, located at the current concept values.
    pub fn new(bank: &ConceptBank, kappa: f64) -> Result<Self> {
        Self::with_pseudo_count(bank, kappa, 1.0)
    }

    pub fn with_pseudo_count(bank: &ConceptBank, kappa: f64, n0: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&kappa) {
            return Err(ConceptError::InvalidKappa(kappa));
        }
        let m = bank.num_concepts();
        let mass = vec![n0 / m as f64; m];
        let weighted_sum = bank.concepts().map(|v| v * n0 / m as f64);
        Ok(Self {
            mass,
            weighted_sum,
            count: n0,
            kappa,
        })
    }

    /// Builds statistics directly from raw values.
    pub fn from_parts(
        mass: Vec<f64>,
        weighted_sum: Tensor,
        count: f64,
        kappa: f64,
    ) -> Result<Self> {
        let (m, _) = weighted_sum.dims2("stream stats")?;
        if mass.len() != m {
            return Err(ConceptError::LengthMismatch {
                expected: m,
                got: mass.len(),
            });
        }
        if !(0.0..=1.0).contains(&kappa) {
            return Err(ConceptError::InvalidKappa(kappa));
        }
        Ok(Self {
            mass,
            weighted_sum,
            count,
            kappa,
        })
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn weighted_sum(&self) -> &Tensor {
        &self.weighted_sum
    }

    pub fn count(&self) -> f64 {
        self.count
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }

    /// Folds one minibatch into the moving averages.
    pub fn accumulate(&mut self, s: &Tensor, z: &Tensor) -> Result<()> {
        let (b, m) = s.dims2("accumulate")?;
        let (bz, d) = z.dims2("accumulate")?;
        let (sm, sd) = self.weighted_sum.dims2("accumulate")?;
        if b != bz || m != sm || d != sd {
            return Err(TensorError::ShapeMismatch {
                op: "accumulate",
                lhs: s.shape().to_vec(),
                rhs: z.shape().to_vec(),
            }
            .into());
        }
        let mut batch_mass = vec![0.0; m];
        let mut batch_sum = vec![0.0; m * d];
        for i in 0..b {
            let si = s.row_slice(i);
            let zi = z.row_slice(i);
            for k in 0..m {
                batch_mass[k] += si[k];
                for t in 0..d {
                    batch_sum[k * d + t] += si[k] * zi[t];
                }
            }
        }
        let (keep, new) = (self.kappa, 1.0 - self.kappa);
        for (v, bm) in self.mass.iter_mut().zip(&batch_mass) {
            *v = *v * keep + bm * new;
        }
        for (v, bs) in self.weighted_sum.data_mut().iter_mut().zip(&batch_sum) {
            *v = *v * keep + bs * new;
        }
        self.count = self.count * keep + b as f64 * new;
        Ok(())
    }

    /// `υ = S / N`, renormalised to sum to one.
    pub fn finalize_upsilon(&self) -> Result<Vec<f64>> {
        if self.count <= 0.0 {
            return Err(ConceptError::ZeroCount);
        }
        let raw: Vec<f64> = self.mass.iter().map(|s| s / self.count).collect();
        let total: f64 = raw.iter().sum();
        if total <= 0.0 {
            return Err(ConceptError::ZeroUpsilon);
        }
        Ok(raw.into_iter().map(|u| u / total).collect())
    }
}

/// Server-side concept update `c_m = Σ_k Csum_m^{(k)} / Σ_k S_m^{(k)}`.
pub fn merge_concepts(stats: &[&StreamStats], previous: &Tensor) -> Result<Tensor> {
    if stats.is_empty() {
        return Err(ConceptError::EmptyData);
    }
    let (m, d) = previous.dims2("merge_concepts")?;
    let mut mass = vec![0.0; m];
    let mut sums = vec![0.0; m * d];
    for st in stats {
        if st.weighted_sum.shape() != previous.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "merge_concepts",
                lhs: previous.shape().to_vec(),
                rhs: st.weighted_sum.shape().to_vec(),
            }
            .into());
        }
        for k in 0..m {
            mass[k] += st.mass[k];
        }
        for (acc, v) in sums.iter_mut().zip(st.weighted_sum.data()) {
            *acc += v;
        }
    }
    ratio_or_previous(&sums, &mass, previous)
}

/// k-means++ seeding over the rows of `points` (D² sampling). Returns
/// `k` rows, repeating points if there are fewer than `k` distinct ones.
pub fn kmeans_pp_seeds<R: Rng + ?Sized>(points: &Tensor, k: usize, rng: &mut R) -> Result<Tensor> {
    let (n, d) = points.dims2("kmeans++")?;
    if n == 0 || k == 0 {
        return Err(ConceptError::EmptyData);
    }
    let mut chosen = vec![rng.random_range(0..n)];
    let mut best: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row_slice(i), points.row_slice(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = best.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, b) in best.iter_mut().enumerate() {
            *b = b.min(squared_distance(
                points.row_slice(i),
                points.row_slice(next),
            ));
        }
    }
    let mut data = Vec::with_capacity(k * d);
    for &i in &chosen {
        data.extend_from_slice(points.row_slice(i));
    }
    Ok(Tensor::matrix(k, d, data)?)
}
