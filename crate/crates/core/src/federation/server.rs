use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::client::{
    client_update_em, client_update_plain, client_update_unified, ClientState, ClientUpdate,
};
use super::{
    initial_bank, stream_seed, ConceptInit, FederationError, Message, Result, SimConfig, Strategy,
};
use crate::concepts::{kmeans_pp_seeds, merge_concepts, ConceptBank, StreamStats};
use crate::data::{ClientPartition, ClientRole, Dataset};
use crate::model::{init_model, predict};
use crate::tensor::{ParamSet, Tensor, TensorError};

const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

/// Global model, concepts and the server's sampling RNG.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub params: ParamSet,
    pub bank: ConceptBank,
    /// Rounds completed so far.
    pub round: usize,
    pub seed: u64,
    pub bytes_exchanged: u64,
    rng: ChaCha8Rng,
}

impl ServerState {
    pub fn new(cfg: &SimConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            params: init_model(&cfg.arch, stream_seed(seed, 1, 0))?,
            bank: initial_bank(cfg, seed)?,
            round: 0,
            seed,
            bytes_exchanged: 0,
            rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, 0, 0)),
        })
    }

    /// Builds one [`ClientState`] per partition entry, ordered by client id.
    pub fn init_clients(
        &mut self,
        cfg: &SimConfig,
        data: &Dataset,
        partition: &ClientPartition,
    ) -> Result<Vec<ClientState>> {
        let mut clients = partition
            .clients
            .iter()
            .map(|a| ClientState::new(a, data, &self.bank, cfg.concepts.kappa))
            .collect::<Result<Vec<_>>>()?;
        clients.sort_by_key(|c| c.id);
        if cfg.strategy.strategy.uses_concepts() && cfg.concepts.init == ConceptInit::KmeansPp {
            self.seed_concepts_kmeans(cfg, &mut clients)?;
        }
        if cfg.strategy.strategy == Strategy::LocalOnly {
            for c in clients
                .iter_mut()
                .filter(|c| c.role == ClientRole::TrainParticipant)
            {
                c.local_params = Some(self.params.clone());
            }
        }
        Ok(clients)
    }

    // Pools the participants' initial embeddings on the server. This is a
    // simulation convenience that bypasses the message whitelist once,
    // before the first round.
    fn seed_concepts_kmeans(&mut self, cfg: &SimConfig, clients: &mut [ClientState]) -> Result<()> {
        let mut parts = Vec::new();
        for c in clients
            .iter()
            .filter(|c| c.role == ClientRole::TrainParticipant)
        {
            parts.push(predict(&self.params, &cfg.arch, c.train.features())?.embedding);
        }
        let refs: Vec<&Tensor> = parts.iter().collect();
        let pooled = Tensor::vstack(&refs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, 3, 0));
        let seeds = kmeans_pp_seeds(&pooled, cfg.concepts.num_concepts, &mut rng)?;
        self.bank.set_concepts(seeds)?;
        for c in clients.iter_mut() {
            c.stats = StreamStats::new(&self.bank, cfg.concepts.kappa)?;
            c.preference = crate::concepts::ClientPreference::uniform(&self.bank);
        }
        Ok(())
    }
}

/// Uniform sample of `cohort_size` ids without replacement, returned in
/// ascending order.
pub fn sample_clients<R: Rng + ?Sized>(
    population: &[usize],
    cohort_size: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    if cohort_size > population.len() {
        return Err(FederationError::Config(format!(
            "cohort of {cohort_size} exceeds the {} eligible clients",
            population.len()
        )));
    }
    let mut cohort: Vec<usize> = population
        .choose_multiple(rng, cohort_size)
        .copied()
        .collect();
    cohort.sort_unstable();
    Ok(cohort)
}

fn check_weights(weights: impl Iterator<Item = f64>) -> Result<()> {
    let sum: f64 = weights.sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(FederationError::WeightSum(sum));
    }
    Ok(())
}

/// Elementwise `Σ α_k ω_k`, accumulated in input order.
pub fn aggregate_params(updates: &[(&ParamSet, f64)]) -> Result<ParamSet> {
    let (first, _) = updates
        .first()
        .ok_or(FederationError::AllClientsFailed(0))?;
    check_weights(updates.iter().map(|(_, a)| *a))?;
    let mut out: ParamSet = first
        .iter()
        .map(|(name, t)| (name.to_string(), Tensor::zeros(t.shape())))
        .collect();
    for (params, alpha) in updates {
        first.check_layout(params)?;
        for (name, t) in params.iter() {
            let acc = out.get_mut(name).expect("layout checked");
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += alpha * v;
            }
        }
    }
    Ok(out)
}

/// Elementwise `Σ α_k C_k`.
pub fn aggregate_concepts(updates: &[(&Tensor, f64)]) -> Result<Tensor> {
    let (first, _) = updates
        .first()
        .ok_or(FederationError::AllClientsFailed(0))?;
    check_weights(updates.iter().map(|(_, a)| *a))?;
    let mut out = Tensor::zeros(first.shape());
    for (c, alpha) in updates {
        if c.shape() != first.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "aggregate_concepts",
                lhs: first.shape().to_vec(),
                rhs: c.shape().to_vec(),
            }
            .into());
        }
        for (a, v) in out.data_mut().iter_mut().zip(c.data()) {
            *a += alpha * v;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub samples: usize,
    pub mean_loss: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub strategy: Strategy,
    pub cohort: Vec<usize>,
    pub dropped: Vec<usize>,
    pub lr: f64,
    pub bytes_down: u64,
    pub bytes_up: u64,
    pub wall_time_secs: f64,
    pub clients: Vec<ClientRoundStats>,
}

struct RoundOutcome {
    cohort: Vec<usize>,
    dropped: Vec<usize>,
    updates: Vec<ClientUpdate>,
    lr: f64,
}

/// Samples the cohort, applies dropouts and runs `update` on each active
/// client in parallel. Results come back ordered by client id.
fn execute_round<F>(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &SimConfig,
    update: F,
) -> Result<RoundOutcome>
where
    F: Fn(&mut ClientState, f64, &mut ChaCha8Rng) -> Result<ClientUpdate> + Sync,
{
    let eligible: Vec<usize> = clients
        .iter()
        .filter(|c| c.role == ClientRole::TrainParticipant)
        .map(|c| c.id)
        .collect();
    let saved_rng = server.rng.clone();
    let cohort = sample_clients(&eligible, cfg.federation.cohort_size, &mut server.rng)?;
    let mut dropped = Vec::new();
    if cfg.federation.drop_prob > 0.0 {
        for &id in &cohort {
            if server.rng.random::<f64>() < cfg.federation.drop_prob {
                dropped.push(id);
            }
        }
    }
    if dropped.len() == cohort.len() {
        server.rng = saved_rng;
        return Err(FederationError::AllClientsFailed(server.round));
    }
    let lr = cfg.federation.lr_at(server.round);
    let (seed, round) = (server.seed, server.round as u64);
    let mut updates = clients
        .par_iter_mut()
        .filter(|c| cohort.binary_search(&c.id).is_ok() && !dropped.contains(&c.id))
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 1000 + round, c.id as u64));
            update(c, lr, &mut rng)
        })
        .collect::<Result<Vec<_>>>()?;
    updates.sort_by_key(|u| u.client_id);
    Ok(RoundOutcome {
        cohort,
        dropped,
        updates,
        lr,
    })
}

/// `α_k = N_k / Σ_j N_j` over the updates.
fn cohort_weights(updates: &[ClientUpdate]) -> Vec<f64> {
    let total: usize = updates.iter().map(|u| u.samples).sum();
    updates
        .iter()
        .map(|u| u.samples as f64 / total as f64)
        .collect()
}

fn check_hygiene(clients: &[ClientState], strategy: Strategy) -> Result<()> {
    for c in clients {
        if c.role == ClientRole::HeldOutTest && c.train_steps() > 0 {
            return Err(FederationError::Hygiene(format!(
                "held-out client {} took {} training steps",
                c.id,
                c.train_steps()
            )));
        }
        if strategy.uses_concepts() && c.finetune_steps() > 0 {
            return Err(FederationError::Hygiene(format!(
                "client {} was fine-tuned under {strategy}",
                c.id
            )));
        }
    }
    Ok(())
}

fn finish(
    server: &mut ServerState,
    clients: &[ClientState],
    cfg: &SimConfig,
    outcome: RoundOutcome,
    bytes_down: u64,
    bytes_up: u64,
    started: Instant,
) -> Result<RoundReport> {
    if !server.params.is_finite() {
        return Err(FederationError::Config(format!(
            "global model diverged at round {}",
            server.round
        )));
    }
    check_hygiene(clients, cfg.strategy.strategy)?;
    server.bytes_exchanged += bytes_down + bytes_up;
    let report = RoundReport {
        round: server.round,
        strategy: cfg.strategy.strategy,
        cohort: outcome.cohort,
        dropped: outcome.dropped,
        lr: outcome.lr,
        bytes_down,
        bytes_up,
        wall_time_secs: started.elapsed().as_secs_f64(),
        clients: outcome
            .updates
            .iter()
            .map(|u| ClientRoundStats {
                client_id: u.client_id,
                samples: u.samples,
                mean_loss: u.mean_loss,
                accuracy_before: u.accuracy_before,
                accuracy_after: u.accuracy_after,
            })
            .collect(),
    };
    server.round += 1;
    Ok(report)
}

fn downlink_bytes(server: &ServerState, active: usize, with_concepts: bool) -> u64 {
    let mut per_client = Message::Params(server.params.clone()).size_bytes();
    if with_concepts {
        per_client += Message::Concepts(server.bank.concepts().clone()).size_bytes();
    }
    per_client * active as u64
}

struct Inbox<'a> {
    params: Vec<(&'a ParamSet, f64)>,
    stats: Vec<&'a StreamStats>,
    concepts: Vec<(&'a Tensor, f64)>,
    bytes: u64,
}

/// Reduces updates to uplink messages and sorts their payloads.
fn collect_messages<'a>(updates: &'a [ClientUpdate], messages: &'a [Vec<Message>]) -> Inbox<'a> {
    let weights = cohort_weights(updates);
    let mut inbox = Inbox {
        params: Vec::new(),
        stats: Vec::new(),
        concepts: Vec::new(),
        bytes: 0,
    };
    for (msgs, &alpha) in messages.iter().zip(&weights) {
        for m in msgs {
            inbox.bytes += m.size_bytes();
            match m {
                Message::Params(p) => inbox.params.push((p, alpha)),
                Message::Stats(s) => inbox.stats.push(s),
                Message::Concepts(c) => inbox.concepts.push((c, alpha)),
            }
        }
    }
    inbox
}

/// One round of the EM-style protocol: model averaging plus the concept
/// update from the merged moving-average statistics.
pub fn run_round_em(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &SimConfig,
) -> Result<RoundReport> {
    if cfg.strategy.strategy != Strategy::FedvcEm {
        return Err(FederationError::WrongStrategy("run_round_em"));
    }
    let started = Instant::now();
    let (global, bank) = (server.params.clone(), server.bank.clone());
    let outcome = execute_round(server, clients, cfg, |c, lr, rng| {
        client_update_em(&global, &bank, c, cfg, lr, rng)
    })?;
    let bytes_down = downlink_bytes(server, outcome.updates.len(), true);
    let messages: Vec<Vec<Message>> = outcome.updates.iter().map(ClientUpdate::uplink).collect();
    let inbox = collect_messages(&outcome.updates, &messages);
    server.params = aggregate_params(&inbox.params)?;
    let merged = merge_concepts(&inbox.stats, server.bank.concepts())?;
    server.bank.set_concepts(merged)?;
    let bytes_up = inbox.bytes;
    drop(inbox);
    finish(server, clients, cfg, outcome, bytes_down, bytes_up, started)
}

/// One round of the unified protocol: model and concept copies are both
/// averaged with the cohort weights.
pub fn run_round_unified(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &SimConfig,
) -> Result<RoundReport> {
    if cfg.strategy.strategy != Strategy::FedvcUnified {
        return Err(FederationError::WrongStrategy("run_round_unified"));
    }
    let started = Instant::now();
    let (global, bank) = (server.params.clone(), server.bank.clone());
    let outcome = execute_round(server, clients, cfg, |c, lr, rng| {
        client_update_unified(&global, &bank, c, cfg, lr, rng)
    })?;
    let bytes_down = downlink_bytes(server, outcome.updates.len(), true);
    let messages: Vec<Vec<Message>> = outcome.updates.iter().map(ClientUpdate::uplink).collect();
    let inbox = collect_messages(&outcome.updates, &messages);
    server.params = aggregate_params(&inbox.params)?;
    let merged = aggregate_concepts(&inbox.concepts)?;
    server.bank.set_concepts(merged)?;
    let bytes_up = inbox.bytes;
    drop(inbox);
    finish(server, clients, cfg, outcome, bytes_down, bytes_up, started)
}

/// One round of a baseline strategy.
pub fn run_baseline(
    strategy: Strategy,
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &SimConfig,
) -> Result<RoundReport> {
    if strategy.uses_concepts() || strategy != cfg.strategy.strategy {
        return Err(FederationError::WrongStrategy("run_baseline"));
    }
    let started = Instant::now();
    let global = server.params.clone();
    let mu = cfg.strategy.fedprox_mu;
    let outcome = execute_round(server, clients, cfg, |c, lr, rng| match strategy {
        Strategy::LocalOnly => {
            let start = c.local_params.clone().unwrap_or_else(|| global.clone());
            let update = client_update_plain(&start, None, c, cfg, lr, rng)?;
            c.local_params = Some(update.params.clone());
            Ok(update)
        }
        Strategy::Fedprox => client_update_plain(&global, Some((&global, mu)), c, cfg, lr, rng),
        _ => client_update_plain(&global, None, c, cfg, lr, rng),
    })?;
    if strategy == Strategy::LocalOnly {
        return finish(server, clients, cfg, outcome, 0, 0, started);
    }
    let bytes_down = downlink_bytes(server, outcome.updates.len(), false);
    let messages: Vec<Vec<Message>> = outcome.updates.iter().map(ClientUpdate::uplink).collect();
    let inbox = collect_messages(&outcome.updates, &messages);
    server.params = aggregate_params(&inbox.params)?;
    let bytes_up = inbox.bytes;
    drop(inbox);
    finish(server, clients, cfg, outcome, bytes_down, bytes_up, started)
}

/// Dispatches one round according to the configured strategy.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut [ClientState],
    cfg: &SimConfig,
) -> Result<RoundReport> {
    match cfg.strategy.strategy {
        Strategy::FedvcEm => run_round_em(server, clients, cfg),
        Strategy::FedvcUnified => run_round_unified(server, clients, cfg),
        other => run_baseline(other, server, clients, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ps(v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::row(vec![v, 2.0 * v]).unwrap());
        p
    }

    #[test]
    fn single_update_is_identity() {
        let p = ps(3.0);
        assert_eq!(aggregate_params(&[(&p, 1.0)]).unwrap(), p);
    }

    #[test]
    fn weights_must_sum_to_one() {
        let p = ps(1.0);
        assert!(matches!(
            aggregate_params(&[(&p, 0.5), (&p, 0.4)]),
            Err(FederationError::WeightSum(_))
        ));
    }

    #[test]
    fn cohort_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(
            sample_clients(&[4, 2, 9], 3, &mut rng).unwrap(),
            vec![2, 4, 9]
        );
        assert!(sample_clients(&[1, 2], 3, &mut rng).is_err());
    }
}
