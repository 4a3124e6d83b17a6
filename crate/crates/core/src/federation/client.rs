use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{FederationError, Message, Result, SimConfig};
use crate::concepts::{relevance, ClientPreference, ConceptBank, StreamStats};
use crate::data::{ClientAssignment, ClientRole, Dataset};
use crate::losses::{classification_loss, em_objective, unified_objective};
use crate::metrics::accuracy;
use crate::model::{forward, predict, ArchConfig, Bindings};
use crate::tensor::{Graph, ParamSet, Tensor};

/// One logical client. Its data never leaves this struct; only the
/// [`Message`]s produced by [`ClientUpdate::uplink`] reach the server.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub group: usize,
    pub role: ClientRole,
    pub train: Dataset,
    pub test: Dataset,
    pub preference: ClientPreference,
    pub stats: StreamStats,
    /// Private model of the local-only baseline.
    pub local_params: Option<ParamSet>,
    train_steps: u64,
    finetune_steps: u64,
}

impl ClientState {
    pub fn new(
        assignment: &ClientAssignment,
        data: &Dataset,
        bank: &ConceptBank,
        kappa: f64,
    ) -> Result<Self> {
        Ok(Self {
            id: assignment.id,
            group: assignment.group,
            role: assignment.role,
            train: data.subset(&assignment.train)?,
            test: data.subset(&assignment.test)?,
            preference: ClientPreference::uniform(bank),
            stats: StreamStats::new(bank, kappa)?,
            local_params: None,
            train_steps: 0,
            finetune_steps: 0,
        })
    }

    /// Number of local training samples, `N_k`.
    pub fn num_samples(&self) -> usize {
        self.train.len()
    }

    /// SGD steps taken while participating in training.
    pub fn train_steps(&self) -> u64 {
        self.train_steps
    }

    /// SGD steps taken on throwaway copies while fine-tuning for evaluation.
    pub fn finetune_steps(&self) -> u64 {
        self.finetune_steps
    }

    fn begin_training(&self) -> Result<()> {
        if self.role != ClientRole::TrainParticipant {
            return Err(FederationError::HeldOutTraining(self.id));
        }
        if self.train.is_empty() {
            return Err(FederationError::EmptyLocalData(self.id));
        }
        Ok(())
    }

    fn batches(&self, epochs: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        for _ in 0..epochs {
            order.shuffle(rng);
            out.extend(order.chunks(batch_size).map(<[usize]>::to_vec));
        }
        out
    }

    fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.train.features().select_rows(indices)?;
        let y = indices.iter().map(|&i| self.train.labels()[i]).collect();
        Ok((x, y))
    }

    /// Recomputes `υ` and `p` from relevance over all local training data
    /// under the broadcast model and concepts. Returns the pre-update
    /// training accuracy as a by-product of the forward pass.
    fn refresh_preference(
        &mut self,
        params: &ParamSet,
        bank: &ConceptBank,
        arch: &ArchConfig,
    ) -> Result<f64> {
        let out = predict(params, arch, self.train.features())?;
        let s = relevance(&out.embedding, bank, self.preference.upsilon())?;
        let mut pass = StreamStats::new(bank, 0.0)?;
        pass.accumulate(&s, &out.embedding)?;
        self.preference = ClientPreference::new(pass.finalize_upsilon()?, bank)?;
        Ok(accuracy(&out.logits.argmax_rows(), self.train.labels())?)
    }

    fn train_accuracy(&self, params: &ParamSet, arch: &ArchConfig) -> Result<f64> {
        let out = predict(params, arch, self.train.features())?;
        Ok(accuracy(&out.logits.argmax_rows(), self.train.labels())?)
    }

    /// Plain cross-entropy SGD on a copy of `params`, for evaluation-time
    /// fine-tuning. Counted separately from training steps.
    pub(crate) fn finetune(
        &mut self,
        params: &ParamSet,
        arch: &ArchConfig,
        epochs: usize,
        batch_size: usize,
        lr: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<ParamSet> {
        let mut params = params.clone();
        for batch in self.batches(epochs, batch_size, rng) {
            let (x, y) = self.batch(&batch)?;
            let (next, _) = plain_step(&params, None, arch, &x, &y, lr)?;
            params = next;
            self.finetune_steps += 1;
        }
        Ok(params)
    }
}

/// Local result of one round, before it is reduced to messages.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub samples: usize,
    pub params: ParamSet,
    pub stats: Option<StreamStats>,
    pub concepts: Option<Tensor>,
    pub mean_loss: f64,
    pub accuracy_before: f64,
    pub accuracy_after: f64,
}

impl ClientUpdate {
    /// The whitelisted messages this update sends to the server.
    pub fn uplink(&self) -> Vec<Message> {
        let mut out = vec![Message::Params(self.params.clone())];
        if let Some(stats) = &self.stats {
            out.push(Message::Stats(stats.clone()));
        }
        if let Some(c) = &self.concepts {
            out.push(Message::Concepts(c.clone()));
        }
        out
    }
}

fn plain_step(
    params: &ParamSet,
    anchor: Option<(&ParamSet, f64)>,
    arch: &ArchConfig,
    x: &Tensor,
    y: &[usize],
    lr: f64,
) -> Result<(ParamSet, f64)> {
    let mut g = Graph::new();
    let b = Bindings::bind(&mut g, params, true);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &b, arch, xv)?;
    let mut loss = classification_loss(&mut g, out.logits, y)?;
    if let Some((global, mu)) = anchor {
        let mut prox = None;
        for (name, w) in b.iter() {
            let target = g.constant(global.require(name)?.clone());
            let diff = g.sub(w, target)?;
            let sq = g.square(diff);
            let s = g.sum(sq);
            prox = Some(match prox {
                None => s,
                Some(acc) => g.add(acc, s)?,
            });
        }
        if let Some(p) = prox {
            let scaled = g.scale(p, 0.5 * mu);
            loss = g.add(loss, scaled)?;
        }
    }
    let grads = g.backward(loss)?;
    let next = params.sgd_step(&b.gradients(&grads), lr)?;
    Ok((next, g.value(loss).item()))
}

/// Cross-entropy training from `start`, optionally with the proximal term
/// `μ/2 ‖ω − ω_global‖²` (the FedProx local objective).
pub fn client_update_plain(
    start: &ParamSet,
    anchor: Option<(&ParamSet, f64)>,
    client: &mut ClientState,
    cfg: &SimConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ClientUpdate> {
    client.begin_training()?;
    let arch = &cfg.arch;
    let f = &cfg.federation;
    let accuracy_before = client.train_accuracy(start, arch)?;
    let mut params = start.clone();
    let mut losses = Vec::new();
    for batch in client.batches(f.local_epochs, f.batch_size, rng) {
        let (x, y) = client.batch(&batch)?;
        let (next, loss) = plain_step(&params, anchor, arch, &x, &y, lr)?;
        params = next;
        losses.push(loss);
        client.train_steps += 1;
    }
    let accuracy_after = client.train_accuracy(&params, arch)?;
    Ok(ClientUpdate {
        client_id: client.id,
        samples: client.num_samples(),
        params,
        stats: None,
        concepts: None,
        mean_loss: mean(&losses),
        accuracy_before,
        accuracy_after,
    })
}

/// EM-mode local round: refresh `υ, p`, then minibatch SGD on
/// `l_cls + l_p` with the broadcast concepts held constant, folding each
/// batch's responsibilities into the client's moving-average statistics.
pub fn client_update_em(
    global: &ParamSet,
    bank: &ConceptBank,
    client: &mut ClientState,
    cfg: &SimConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ClientUpdate> {
    client.begin_training()?;
    let arch = &cfg.arch;
    let f = &cfg.federation;
    let accuracy_before = client.refresh_preference(global, bank, arch)?;
    let upsilon = client.preference.upsilon().to_vec();
    let preference = client.preference.preference().to_vec();
    let mut params = global.clone();
    let mut losses = Vec::new();
    for batch in client.batches(f.local_epochs, f.batch_size, rng) {
        let (x, y) = client.batch(&batch)?;
        let mut g = Graph::new();
        let b = Bindings::bind(&mut g, &params, true);
        let xv = g.constant(x);
        let out = forward(&mut g, &b, arch, xv)?;
        let terms = em_objective(
            &mut g,
            out.logits,
            out.embedding,
            &y,
            bank.concepts(),
            &upsilon,
            &preference,
            bank.iota(),
        )?;
        let grads = g.backward(terms.total)?;
        params = params.sgd_step(&b.gradients(&grads), lr)?;
        client
            .stats
            .accumulate(g.value(terms.relevance), g.value(out.embedding))?;
        losses.push(g.value(terms.total).item());
        client.train_steps += 1;
    }
    let accuracy_after = client.train_accuracy(&params, arch)?;
    Ok(ClientUpdate {
        client_id: client.id,
        samples: client.num_samples(),
        params,
        stats: Some(client.stats.clone()),
        concepts: None,
        mean_loss: mean(&losses),
        accuracy_before,
        accuracy_after,
    })
}

/// Unified-mode local round: refresh `υ, p`, then SGD on the stop-gradient
/// objective updating both the model and a local copy of the concepts.
pub fn client_update_unified(
    global: &ParamSet,
    bank: &ConceptBank,
    client: &mut ClientState,
    cfg: &SimConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ClientUpdate> {
    client.begin_training()?;
    let arch = &cfg.arch;
    let f = &cfg.federation;
    let accuracy_before = client.refresh_preference(global, bank, arch)?;
    let upsilon = client.preference.upsilon().to_vec();
    let mut params = global.clone();
    let mut concepts = bank.concepts().clone();
    let mut losses = Vec::new();
    for batch in client.batches(f.local_epochs, f.batch_size, rng) {
        let (x, y) = client.batch(&batch)?;
        let mut g = Graph::new();
        let b = Bindings::bind(&mut g, &params, true);
        let c = g.param(concepts.clone());
        let xv = g.constant(x);
        let out = forward(&mut g, &b, arch, xv)?;
        let terms = unified_objective(
            &mut g,
            out.logits,
            out.embedding,
            &y,
            c,
            &upsilon,
            bank.iota(),
            cfg.concepts.gamma,
        )?;
        let grads = g.backward(terms.total)?;
        params = params.sgd_step(&b.gradients(&grads), lr)?;
        let dc = grads.wrt_or_zero(c);
        for (v, d) in concepts.data_mut().iter_mut().zip(dc.data()) {
            *v -= lr * d;
        }
        losses.push(g.value(terms.total).item());
        client.train_steps += 1;
    }
    let accuracy_after = client.train_accuracy(&params, arch)?;
    Ok(ClientUpdate {
        client_id: client.id,
        samples: client.num_samples(),
        params,
        stats: None,
        concepts: Some(concepts),
        mean_loss: mean(&losses),
        accuracy_before,
        accuracy_after,
    })
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}
