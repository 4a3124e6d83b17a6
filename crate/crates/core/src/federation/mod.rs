//! Simulated federated training.
//!
//! A run is a [`ServerState`] plus one [`ClientState`] per partition entry.
//! Each round the server samples a cohort of training participants,
//! broadcasts its snapshot, lets the clients train independently (in
//! parallel) and merges their uplink [`Message`]s in client-id order.

mod checkpoint;
mod client;
mod eval;
mod server;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use client::{
    client_update_em, client_update_plain, client_update_unified, ClientState, ClientUpdate,
};
pub use eval::{evaluate_global, preference_embeddings, trunk_embeddings};
pub use server::{
    aggregate_concepts, aggregate_params, run_baseline, run_round, run_round_em, run_round_unified,
    sample_clients, ClientRoundStats, RoundReport, ServerState,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::concepts::{ConceptBank, ConceptError};
use crate::data::DataError;
use crate::losses::LossError;
use crate::metrics::MetricsError;
use crate::model::{ArchConfig, ModelError};
use crate::tensor::{ParamSet, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum FederationError {
    #[error("invalid federation config: {0}")]
    Config(String),
    #[error("client {0} is held out and must never train")]
    HeldOutTraining(usize),
    #[error("client {0} has no local training data")]
    EmptyLocalData(usize),
    #[error("aggregation weights sum to {0}, expected 1")]
    WeightSum(f64),
    #[error("every client in the cohort failed; round {0} aborted")]
    AllClientsFailed(usize),
    #[error("strategy {0} is not handled here")]
    WrongStrategy(&'static str),
    #[error("held-out hygiene violated: {0}")]
    Hygiene(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Concept(#[from] ConceptError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = FederationError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    LocalOnly,
    Fedavg,
    FedavgFt,
    Fedprox,
    FedvcEm,
    FedvcUnified,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::LocalOnly,
        Strategy::Fedavg,
        Strategy::FedavgFt,
        Strategy::Fedprox,
        Strategy::FedvcEm,
        Strategy::FedvcUnified,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::LocalOnly => "local_only",
            Strategy::Fedavg => "fedavg",
            Strategy::FedavgFt => "fedavg_ft",
            Strategy::Fedprox => "fedprox",
            Strategy::FedvcEm => "fedvc_em",
            Strategy::FedvcUnified => "fedvc_unified",
        }
    }

    pub fn uses_concepts(self) -> bool {
        matches!(self, Strategy::FedvcEm | Strategy::FedvcUnified)
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = FederationError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| FederationError::Config(format!("unknown strategy `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    pub fedprox_mu: f64,
    /// Epochs of local fine-tuning before evaluation (fedavg_ft only).
    pub finetune_epochs: usize,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::FedvcEm,
            fedprox_mu: 0.01,
            finetune_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FederationConfig {
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub cohort_size: usize,
    /// Probability that a sampled client drops out of a round.
    pub drop_prob: f64,
    /// Evaluate every this many rounds (the final round is always evaluated).
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            local_epochs: 2,
            batch_size: 10,
            lr: 0.005,
            lr_decay: 0.8,
            lr_decay_every: 10,
            cohort_size: 10,
            drop_prob: 0.0,
            eval_every: 1,
        }
    }
}

impl FederationConfig {
    /// Step-decayed learning rate for round `r` (counting from 0).
    pub fn lr_at(&self, round: usize) -> f64 {
        let steps = round.checked_div(self.lr_decay_every).unwrap_or(0);
        self.lr * self.lr_decay.powi(steps as i32)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ConceptInit {
    #[default]
    Random,
    /// k-means++ seeds over the training participants' initial embeddings.
    KmeansPp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConceptConfig {
    pub num_concepts: usize,
    pub iota: f64,
    pub kappa: f64,
    /// Weight of the concept-pull term; only read in unified mode.
    pub gamma: f64,
    pub init: ConceptInit,
}

impl Default for ConceptConfig {
    fn default() -> Self {
        Self {
            num_concepts: 10,
            iota: 0.1,
            kappa: 0.05,
            gamma: 0.1,
            init: ConceptInit::Random,
        }
    }
}

/// Everything the training loop reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct SimConfig {
    pub arch: ArchConfig,
    pub federation: FederationConfig,
    pub strategy: StrategyConfig,
    pub concepts: ConceptConfig,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FederationError::Config(m));
        self.arch.validate()?;
        let f = &self.federation;
        if f.batch_size == 0 {
            return bad("federation.batch_size must be positive".into());
        }
        if f.cohort_size == 0 {
            return bad("federation.cohort_size must be positive".into());
        }
        if !(f.lr.is_finite() && f.lr >= 0.0) {
            return bad(format!("federation.lr must be non-negative, got {}", f.lr));
        }
        if !(f.lr_decay > 0.0 && f.lr_decay <= 1.0) {
            return bad(format!(
                "federation.lr_decay must lie in (0, 1], got {}",
                f.lr_decay
            ));
        }
        if !(0.0..1.0).contains(&f.drop_prob) {
            return bad(format!(
                "federation.drop_prob must lie in [0, 1), got {}",
                f.drop_prob
            ));
        }
        if f.eval_every == 0 {
            return bad("federation.eval_every must be positive".into());
        }
        let s = &self.strategy;
        if !(s.fedprox_mu.is_finite() && s.fedprox_mu >= 0.0) {
            return bad(format!(
                "strategy.fedprox_mu must be non-negative, got {}",
                s.fedprox_mu
            ));
        }
        let c = &self.concepts;
        if c.num_concepts == 0 {
            return bad("concepts.num_concepts must be positive".into());
        }
        if !(c.iota.is_finite() && c.iota > 0.0) {
            return bad(format!("concepts.iota must be positive, got {}", c.iota));
        }
        if !(0.0..=1.0).contains(&c.kappa) {
            return bad(format!(
                "concepts.kappa must lie in [0, 1], got {}",
                c.kappa
            ));
        }
        if !(c.gamma.is_finite() && c.gamma >= 0.0) {
            return bad(format!(
                "concepts.gamma must be non-negative, got {}",
                c.gamma
            ));
        }
        Ok(())
    }
}

/// Everything that may cross the simulated network.
#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Params(ParamSet),
    Stats(crate::concepts::StreamStats),
    Concepts(Tensor),
}

impl Message {
    /// Payload size counted at 8 bytes per value.
    pub fn size_bytes(&self) -> u64 {
        let values = match self {
            Message::Params(p) => p.num_values(),
            Message::Stats(s) => s.mass().len() + s.weighted_sum().len() + 1,
            Message::Concepts(c) => c.len(),
        };
        8 * values as u64
    }
}

/// Mixes a run seed with stream identifiers into an independent seed.
pub fn stream_seed(seed: u64, a: u64, b: u64) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    splitmix(splitmix(splitmix(seed) ^ a) ^ b.rotate_left(17))
}

pub(crate) fn initial_bank(cfg: &SimConfig, seed: u64) -> Result<ConceptBank> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(stream_seed(seed, 2, 0));
    Ok(ConceptBank::random(
        &mut rng,
        cfg.concepts.num_concepts,
        cfg.arch.embed_dim,
        cfg.concepts.iota,
    )?)
}
