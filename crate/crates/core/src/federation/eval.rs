use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::client::ClientState;
use super::server::ServerState;
use super::{stream_seed, Result, SimConfig, Strategy};
use crate::concepts::{estimated_preferences, relevance, ConceptBank};
use crate::metrics::{ClassificationScores, MetricsRecord, Split};
use crate::model::{predict, ArchConfig};
use crate::tensor::{ParamSet, Tensor};

/// Scores every client on both local splits.
///
/// The global model is applied as-is, except under `fedavg_ft` (each client
/// first fine-tunes a throwaway copy on its local training split) and
/// `local_only` (each participant's private model; held-out clients have
/// none and are skipped).
pub fn evaluate_global(
    server: &ServerState,
    clients: &mut [ClientState],
    cfg: &SimConfig,
    run_id: &str,
    round: usize,
) -> Result<Vec<MetricsRecord>> {
    let strategy = cfg.strategy.strategy;
    let per_client = clients
        .par_iter_mut()
        .map(|c| -> Result<Vec<MetricsRecord>> {
            let params: ParamSet = match strategy {
                Strategy::LocalOnly => match &c.local_params {
                    Some(p) => p.clone(),
                    None => return Ok(Vec::new()),
                },
                Strategy::FedavgFt => {
                    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(
                        server.seed,
                        500_000 + round as u64,
                        c.id as u64,
                    ));
                    c.finetune(
                        &server.params,
                        &cfg.arch,
                        cfg.strategy.finetune_epochs,
                        cfg.federation.batch_size,
                        cfg.federation.lr_at(round),
                        &mut rng,
                    )?
                }
                _ => server.params.clone(),
            };
            let mut out = Vec::with_capacity(2);
            for (split, data) in [(Split::LocalTrain, &c.train), (Split::LocalTest, &c.test)] {
                let logits = predict(&params, &cfg.arch, data.features())?.logits;
                let scores = ClassificationScores::from_logits(&logits, data.labels())?;
                out.push(MetricsRecord {
                    run_id: run_id.to_string(),
                    round,
                    strategy: strategy.as_str().to_string(),
                    client_id: c.id,
                    group_id: c.group,
                    role: c.role.as_str().to_string(),
                    split,
                    accuracy: scores.accuracy,
                    weighted_auc: scores.weighted_auc,
                    weighted_f1: scores.weighted_f1,
                });
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_client.into_iter().flatten().collect())
}

/// Estimated preferences `p̂ = s·C` of the rows of `x` under concept
/// weights `upsilon` (pass [`crate::concepts::uniform_upsilon`] for a client-agnostic view).
pub fn preference_embeddings(
    params: &ParamSet,
    bank: &ConceptBank,
    arch: &ArchConfig,
    x: &Tensor,
    upsilon: &[f64],
) -> Result<Tensor> {
    let z = predict(params, arch, x)?.embedding;
    let s = relevance(&z, bank, upsilon)?;
    Ok(estimated_preferences(&s, bank)?)
}

/// Last shared hidden layer.
pub fn trunk_embeddings(params: &ParamSet, arch: &ArchConfig, x: &Tensor) -> Result<Tensor> {
    Ok(predict(params, arch, x)?.trunk)
}
