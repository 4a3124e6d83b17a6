//! Training objectives built on the autodiff graph.
//!
//! * [`em_objective`]: `l_cls + l_p(p̂, p)` with concepts held constant.
//! * [`unified_objective`]: `l_cls + l_p(p̂, sg[p]) + γ·l_p(sg[p̂], p)`.
//!   The first preference term only reaches the model (concepts enter
//!   `p̂` through a stop-gradient), the second only reaches the concepts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{validate_upsilon, ConceptError};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("gamma must be non-negative and finite, got {0}")]
    NegativeGamma(f64),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Em,
    Unified,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub gamma: f64,
    pub mode: LossMode,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(LossError::NegativeGamma(self.gamma));
        }
        Ok(())
    }
}

/// Mean softmax cross-entropy.
pub fn classification_loss(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let (_, c) = g.value(logits).dims2("classification_loss")?;
    if let Some(&label) = labels.iter().find(|&&y| y >= c) {
        return Err(LossError::LabelOutOfRange {
            label,
            num_classes: c,
        });
    }
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.pick(logp, labels)?;
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

/// Batch mean of `‖p̂_i − p_i‖²`. `target` is either `B × d` or a single
/// `1 × d` row shared by the batch.
pub fn preference_loss(g: &mut Graph, estimate: Var, target: Var) -> Result<Var> {
    let (b, _) = g.value(estimate).dims2("preference_loss")?;
    let diff = if g.value(target).rows() == 1 && b != 1 {
        g.sub_row(estimate, target)?
    } else {
        g.sub(estimate, target)?
    };
    let sq = g.square(diff);
    let total = g.sum(sq);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Responsibilities as a graph node: row softmax of `ln υ − ι·D(z, C)`.
pub fn relevance_node(
    g: &mut Graph,
    embedding: Var,
    concepts: Var,
    upsilon: &[f64],
    iota: f64,
) -> Result<Var> {
    let m = g.value(concepts).rows();
    validate_upsilon(upsilon, m)?;
    let dist = g.sq_dist(embedding, concepts)?;
    let scaled = g.scale(dist, -iota);
    let log_u = g.constant(Tensor::row(upsilon.iter().map(|u| u.ln()).collect())?);
    let logits = g.add_row(scaled, log_u)?;
    Ok(g.softmax_rows(logits)?)
}

/// `p = υᵀ C` as a `1 × d` node.
pub fn preference_node(g: &mut Graph, concepts: Var, upsilon: &[f64]) -> Result<Var> {
    let u = g.constant(Tensor::row(upsilon.to_vec())?);
    Ok(g.matmul(u, concepts)?)
}

/// Handles to the individual terms of an objective.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub total: Var,
    pub classification: Var,
    /// `l_p(p̂, sg[p])` (or `l_p(p̂, p)` with constant concepts).
    pub preference: Var,
    /// `l_p(sg[p̂], p)` in unified mode.
    pub concept_pull: Option<Var>,
    pub relevance: Var,
}

/// `l_cls + l_p(p̂, p)` where `concepts` and `preference` are constants.
pub fn em_objective(
    g: &mut Graph,
    logits: Var,
    embedding: Var,
    labels: &[usize],
    concepts: &Tensor,
    upsilon: &[f64],
    preference: &[f64],
    iota: f64,
) -> Result<LossTerms> {
    let classification = classification_loss(g, logits, labels)?;
    let c = g.constant(concepts.clone());
    let s = relevance_node(g, embedding, c, upsilon, iota)?;
    let estimate = g.matmul(s, c)?;
    let target = g.constant(Tensor::row(preference.to_vec())?);
    let pref = preference_loss(g, estimate, target)?;
    let total = g.add(classification, pref)?;
    Ok(LossTerms {
        total,
        classification,
        preference: pref,
        concept_pull: None,
        relevance: s,
    })
}

/// Unified objective; `concepts` should be a trainable node.
pub fn unified_objective(
    g: &mut Graph,
    logits: Var,
    embedding: Var,
    labels: &[usize],
    concepts: Var,
    upsilon: &[f64],
    iota: f64,
    gamma: f64,
) -> Result<LossTerms> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(LossError::NegativeGamma(gamma));
    }
    let classification = classification_loss(g, logits, labels)?;
    let frozen = g.stop_gradient(concepts);
    let s = relevance_node(g, embedding, frozen, upsilon, iota)?;
    let estimate = g.matmul(s, frozen)?;
    let p = preference_node(g, concepts, upsilon)?;

    let p_sg = g.stop_gradient(p);
    let pref = preference_loss(g, estimate, p_sg)?;
    let estimate_sg = g.stop_gradient(estimate);
    let pull = preference_loss(g, estimate_sg, p)?;

    let weighted = g.scale(pull, gamma);
    let partial = g.add(classification, pref)?;
    let total = g.add(partial, weighted)?;
    Ok(LossTerms {
        total,
        classification,
        preference: pref,
        concept_pull: Some(pull),
        relevance: s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[3, 10]));
        let l = classification_loss(&mut g, logits, &[0, 4, 9]).unwrap();
        assert!((g.value(l).item() - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::matrix(1, 3, vec![50.0, 0.0, 0.0]).unwrap());
        let l = classification_loss(&mut g, logits, &[0]).unwrap();
        assert!(g.value(l).item() < 1e-20);
    }

    #[test]
    fn label_out_of_range() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 3]));
        assert_eq!(
            classification_loss(&mut g, logits, &[3]).unwrap_err(),
            LossError::LabelOutOfRange {
                label: 3,
                num_classes: 3
            }
        );
    }

    #[test]
    fn preference_loss_values() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::row(vec![3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::row(vec![0.0, 0.0]).unwrap());
        let l = preference_loss(&mut g, a, b).unwrap();
        assert_eq!(g.value(l).item(), 25.0);
        let same = preference_loss(&mut g, a, a).unwrap();
        assert_eq!(g.value(same).item(), 0.0);
    }

    #[test]
    fn preference_loss_gradient_is_twice_difference() {
        let mut g = Graph::new();
        let a = g.param(Tensor::row(vec![3.0, 4.0]).unwrap());
        let b = g.constant(Tensor::row(vec![1.0, -1.0]).unwrap());
        let l = preference_loss(&mut g, a, b).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.wrt(a).unwrap().data(), &[4.0, 10.0]);
    }

    #[test]
    fn dimension_mismatch_is_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(preference_loss(&mut g, a, b).is_err());
    }

    #[test]
    fn negative_gamma_rejected() {
        let mut g = Graph::new();
        let logits = g.constant(Tensor::zeros(&[1, 2]));
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let c = g.param(Tensor::zeros(&[2, 2]));
        let err =
            unified_objective(&mut g, logits, z, &[0], c, &[0.5, 0.5], 0.1, -1.0).unwrap_err();
        assert_eq!(err, LossError::NegativeGamma(-1.0));
        assert!(LossConfig {
            gamma: -0.5,
            mode: LossMode::Unified
        }
        .validate()
        .is_err());
    }
}
