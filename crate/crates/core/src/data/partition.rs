//! Non-IID client partitions.
//!
//! Clients are organised in groups. Groups below `train_groups` contribute
//! training participants; the rest are held out and only ever evaluated.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result};
use crate::tensor::Tensor;

const MAX_DRAW_RETRIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    TargetShift,
    FeatureShift,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    pub mode: ShiftMode,
    /// Label-distribution groups (target shift) or domains (feature shift).
    pub num_groups: usize,
    /// Groups `0..train_groups` host training participants.
    pub train_groups: usize,
    pub clients_per_group: usize,
    /// Feature shift: clients per training domain kept aside for testing.
    pub held_out_per_group: usize,
    /// Feature shift: extra test clients drawing samples from every domain.
    pub mixed_clients: usize,
    pub dirichlet_alpha: f64,
    /// Fraction of each client's samples reserved for its local test split.
    pub test_fraction: f64,
    /// Feature shift: magnitude of the per-domain transforms.
    pub shift_strength: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            mode: ShiftMode::TargetShift,
            num_groups: 5,
            train_groups: 3,
            clients_per_group: 8,
            held_out_per_group: 1,
            mixed_clients: 5,
            dirichlet_alpha: 0.5,
            test_fraction: 0.2,
            shift_strength: 1.0,
        }
    }
}

impl ShiftConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(DataError::Config(m.to_string()));
        if !(self.dirichlet_alpha > 0.0 && self.dirichlet_alpha.is_finite()) {
            return err("dirichlet_alpha must be positive");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return err("test_fraction must lie in (0, 1)");
        }
        if self.num_groups == 0 || self.clients_per_group == 0 {
            return err("num_groups and clients_per_group must be positive");
        }
        if self.train_groups == 0 || self.train_groups > self.num_groups {
            return err("train_groups must lie in 1..=num_groups");
        }
        if self.mode == ShiftMode::FeatureShift {
            if self.num_groups < 2 {
                return err("feature shift needs at least 2 domains");
            }
            if self.held_out_per_group >= self.clients_per_group {
                return err(
                    "held_out_per_group must leave at least one training client per domain",
                );
            }
            if !(self.shift_strength >= 0.0) {
                return err("shift_strength must be non-negative");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum ClientRole {
    TrainParticipant,
    HeldOutTest,
}

impl ClientRole {
    pub fn as_str(self) -> &'static str {
        match self {
            ClientRole::TrainParticipant => "train",
            ClientRole::HeldOutTest => "held_out",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientAssignment {
    pub id: usize,
    pub group: usize,
    pub role: ClientRole,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientPartition {
    pub clients: Vec<ClientAssignment>,
    pub num_groups: usize,
    /// Target shift: the class-distribution vector drawn for each group.
    pub group_class_weights: Option<Vec<Vec<f64>>>,
}

impl ClientPartition {
    pub fn train_participants(&self) -> impl Iterator<Item = &ClientAssignment> {
        self.clients
            .iter()
            .filter(|c| c.role == ClientRole::TrainParticipant)
    }

    pub fn held_out(&self) -> impl Iterator<Item = &ClientAssignment> {
        self.clients
            .iter()
            .filter(|c| c.role == ClientRole::HeldOutTest)
    }

    /// Checks that every index is in range, assigned at most once, and that
    /// every client has both a train and a test split.
    pub fn validate(&self, dataset_len: usize) -> Result<()> {
        let mut seen = vec![false; dataset_len];
        for c in &self.clients {
            for &i in c.train.iter().chain(&c.test) {
                if i >= dataset_len {
                    return Err(DataError::Partition(format!(
                        "client {} index {i} out of range",
                        c.id
                    )));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(DataError::Partition(format!("index {i} assigned twice")));
                }
            }
        }
        if let Some(c) = self
            .clients
            .iter()
            .find(|c| c.train.is_empty() || c.test.is_empty())
        {
            return Err(DataError::Partition(format!(
                "client {} has an empty split",
                c.id
            )));
        }
        Ok(())
    }

    /// Structured-text manifest for auditing.
    pub fn to_manifest(&self) -> String {
        serde_json::to_string_pretty(self).expect("partition serialises")
    }

    pub fn from_manifest(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| DataError::Partition(format!("bad manifest: {e}")))
    }
}

fn draw_dirichlet<R: Rng + ?Sized>(
    rng: &mut R,
    alpha: f64,
    len: usize,
) -> Result<Option<Vec<f64>>> {
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| DataError::Config(e.to_string()))?;
    let draws: Vec<f64> = (0..len).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draws.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return Ok(None);
    }
    Ok(Some(draws.into_iter().map(|v| v / total).collect()))
}

/// Deals `items` into `parts` contiguous chunks whose sizes differ by at most one.
fn split_even<T: Clone>(items: &[T], parts: usize) -> Vec<Vec<T>> {
    let base = items.len() / parts;
    let extra = items.len() % parts;
    let mut out = Vec::with_capacity(parts);
    let mut start = 0;
    for p in 0..parts {
        let len = base + usize::from(p < extra);
        out.push(items[start..start + len].to_vec());
        start += len;
    }
    out
}

/// Splits a client's indices into `(train, test)`, stratified by label.
fn local_split(
    indices: &[usize],
    labels: &[usize],
    test_fraction: f64,
) -> (Vec<usize>, Vec<usize>) {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let target =
        ((indices.len() as f64 * test_fraction).round() as usize).clamp(1, indices.len() - 1);
    // Interleave classes so that taking a prefix is stratified.
    let mut interleaved = Vec::with_capacity(indices.len());
    let lists: Vec<Vec<usize>> = by_class.into_values().collect();
    let longest = lists.iter().map(Vec::len).max().unwrap_or(0);
    for r in 0..longest {
        for l in &lists {
            if let Some(&i) = l.get(r) {
                interleaved.push(i);
            }
        }
    }
    let (test, train) = interleaved.split_at(target);
    let mut train = train.to_vec();
    let mut test = test.to_vec();
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

/// Target-shift partition: one Dirichlet class-distribution draw per group;
/// each class is divided among groups in proportion to the groups' weight
/// for it, and each group's pool is split evenly among its clients.
pub fn dirichlet_label_partition(
    ds: &Dataset,
    cfg: &ShiftConfig,
    seed: u64,
) -> Result<ClientPartition> {
    cfg.validate()?;
    if cfg.mode != ShiftMode::TargetShift {
        return Err(DataError::Config(
            "dirichlet_label_partition needs target_shift mode".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = ds.num_classes();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in ds.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    let min_pool = 2 * cfg.clients_per_group;

    for _attempt in 0..=MAX_DRAW_RETRIES {
        let mut weights = Vec::with_capacity(cfg.num_groups);
        for _ in 0..cfg.num_groups {
            match draw_dirichlet(&mut rng, cfg.dirichlet_alpha, classes)? {
                Some(w) => weights.push(w),
                None => break,
            }
        }
        if weights.len() != cfg.num_groups {
            continue;
        }
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); cfg.num_groups];
        for (c, members) in by_class.iter().enumerate() {
            let mut members = members.clone();
            members.shuffle(&mut rng);
            let total: f64 = weights.iter().map(|w| w[c]).sum();
            let mut cum = 0.0;
            let mut start = 0;
            for (g, w) in weights.iter().enumerate() {
                cum += if total > 0.0 {
                    w[c] / total
                } else {
                    1.0 / cfg.num_groups as f64
                };
                let end = if g + 1 == cfg.num_groups {
                    members.len()
                } else {
                    ((cum * members.len() as f64).round() as usize).min(members.len())
                };
                pools[g].extend_from_slice(&members[start..end.max(start)]);
                start = end.max(start);
            }
        }
        if pools.iter().any(|p| p.len() < min_pool) {
            continue;
        }
        let mut clients = Vec::new();
        for (g, pool) in pools.iter_mut().enumerate() {
            pool.shuffle(&mut rng);
            let role = if g < cfg.train_groups {
                ClientRole::TrainParticipant
            } else {
                ClientRole::HeldOutTest
            };
            for chunk in split_even(pool, cfg.clients_per_group) {
                let (train, test) = local_split(&chunk, ds.labels(), cfg.test_fraction);
                clients.push(ClientAssignment {
                    id: clients.len(),
                    group: g,
                    role,
                    train,
                    test,
                });
            }
        }
        let partition = ClientPartition {
            clients,
            num_groups: cfg.num_groups,
            group_class_weights: Some(weights),
        };
        partition.validate(ds.len())?;
        return Ok(partition);
    }
    Err(DataError::Partition(format!(
        "a group received fewer than {min_pool} samples after {} draws",
        MAX_DRAW_RETRIES + 1
    )))
}

/// A fixed per-domain input transform `x ↦ scale·(x·A) + offset + noise`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainTransform {
    pub linear: Option<Tensor>,
    pub scale: f64,
    pub offset: Vec<f64>,
    pub noise_std: f64,
}

impl DomainTransform {
    pub fn identity(dim: usize) -> Self {
        Self {
            linear: None,
            scale: 1.0,
            offset: vec![0.0; dim],
            noise_std: 0.0,
        }
    }

    fn random<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        strength: f64,
        feature_scale: f64,
    ) -> Result<Self> {
        let mut a = Tensor::identity(dim);
        let mix = 0.3 * strength / (dim as f64).sqrt();
        for v in a.data_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *v += mix * g;
        }
        let mut dir: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = dir
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
            .max(f64::MIN_POSITIVE);
        let magnitude = strength * feature_scale * (dim as f64).sqrt();
        dir.iter_mut().for_each(|v| *v *= magnitude / norm);
        Ok(Self {
            linear: Some(a),
            scale: 1.0 + 0.25 * strength * rng.random_range(-1.0..1.0),
            offset: dir,
            noise_std: 0.1 * strength * feature_scale,
        })
    }

    pub fn apply<R: Rng + ?Sized>(&self, x: &Tensor, rng: &mut R) -> Result<Tensor> {
        let mut out = match &self.linear {
            Some(a) => x.matmul(a)?,
            None => x.clone(),
        };
        let d = out.cols();
        for (j, v) in out.data_mut().iter_mut().enumerate() {
            let noise: f64 = if self.noise_std > 0.0 {
                self.noise_std * Distribution::<f64>::sample(&StandardNormal, rng)
            } else {
                0.0
            };
            *v = self.scale * *v + self.offset[j % d] + noise;
        }
        Ok(out)
    }
}

/// Feature-shift partition over synthetic domains.
///
/// The base samples are dealt class-stratified into `num_groups` domains and
/// transformed by that domain's [`DomainTransform`] (domain 0 is the
/// identity). Each domain is dealt, again per class, into
/// `clients_per_group` domain clients plus one share for every mixed client.
/// In training domains the last `held_out_per_group` clients are held out;
/// domains at or above `train_groups` and all mixed clients (group
/// `num_groups`) are held out entirely.
pub fn feature_shift_partition(
    base: &Dataset,
    cfg: &ShiftConfig,
    seed: u64,
) -> Result<(Dataset, ClientPartition, Vec<DomainTransform>)> {
    cfg.validate()?;
    if cfg.mode != ShiftMode::FeatureShift {
        return Err(DataError::Config(
            "feature_shift_partition needs feature_shift mode".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let domains = cfg.num_groups;
    let slots = cfg.clients_per_group + cfg.mixed_clients;
    let dim = base.dim();

    let (_, stds) = base.column_moments();
    let feature_scale = stds.iter().sum::<f64>() / dim as f64;
    let mut transforms = vec![DomainTransform::identity(dim)];
    for _ in 1..domains {
        transforms.push(DomainTransform::random(
            &mut rng,
            dim,
            cfg.shift_strength,
            feature_scale,
        )?);
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); base.num_classes()];
    for (i, &y) in base.labels().iter().enumerate() {
        by_class[y].push(i);
    }
    // domain -> slot -> base indices
    // The per-domain cursor carries over between classes so slots fill evenly.
    let mut layout: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); slots]; domains];
    let mut cursor = vec![0usize; domains];
    for members in &mut by_class {
        members.shuffle(&mut rng);
        for (r, &i) in members.iter().enumerate() {
            let d = r % domains;
            layout[d][cursor[d] % slots].push(i);
            cursor[d] += 1;
        }
    }

    let mut rows: Vec<Tensor> = Vec::with_capacity(domains);
    let mut labels = Vec::new();
    let mut domain_ids = Vec::new();
    let mut slot_indices: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); slots]; domains];
    for (d, domain_slots) in layout.iter().enumerate() {
        let order: Vec<usize> = domain_slots.iter().flatten().copied().collect();
        if order.is_empty() {
            return Err(DataError::Partition(format!(
                "domain {d} received no samples"
            )));
        }
        let raw = base.features().select_rows(&order)?;
        rows.push(transforms[d].apply(&raw, &mut rng)?);
        let mut next = labels.len();
        for (s, members) in domain_slots.iter().enumerate() {
            for &i in members {
                slot_indices[d][s].push(next);
                labels.push(base.labels()[i]);
                domain_ids.push(d);
                next += 1;
            }
        }
    }
    let parts: Vec<&Tensor> = rows.iter().collect();
    let shifted = Dataset::new(Tensor::vstack(&parts)?, labels, base.num_classes())?
        .with_domains(domain_ids)?;

    let mut clients = Vec::new();
    let mut push = |group: usize, role: ClientRole, indices: Vec<usize>| -> Result<()> {
        if indices.len() < 2 {
            return Err(DataError::Partition(format!(
                "client in group {group} received {} samples",
                indices.len()
            )));
        }
        let (train, test) = local_split(&indices, shifted.labels(), cfg.test_fraction);
        clients.push(ClientAssignment {
            id: clients.len(),
            group,
            role,
            train,
            test,
        });
        Ok(())
    };
    for (d, domain_slots) in slot_indices.iter().enumerate() {
        for (s, members) in domain_slots.iter().take(cfg.clients_per_group).enumerate() {
            let role = if d < cfg.train_groups && s < cfg.clients_per_group - cfg.held_out_per_group
            {
                ClientRole::TrainParticipant
            } else {
                ClientRole::HeldOutTest
            };
            push(d, role, members.clone())?;
        }
    }
    for m in 0..cfg.mixed_clients {
        let members: Vec<usize> = slot_indices
            .iter()
            .flat_map(|domain_slots| domain_slots[cfg.clients_per_group + m].iter().copied())
            .collect();
        push(domains, ClientRole::HeldOutTest, members)?;
    }
    let partition = ClientPartition {
        clients,
        num_groups: domains + usize::from(cfg.mixed_clients > 0),
        group_class_weights: None,
    };
    partition.validate(shifted.len())?;
    Ok((shifted, partition, transforms))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn balanced(n_per_class: usize, classes: usize, dim: usize) -> Dataset {
        let n = n_per_class * classes;
        let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
        let features = (0..n * dim).map(|v| (v % 17) as f64 * 0.1).collect();
        Dataset::new(Tensor::matrix(n, dim, features).unwrap(), labels, classes).unwrap()
    }

    #[test]
    fn split_even_sizes() {
        let parts = split_even(&[1, 2, 3, 4, 5], 3);
        assert_eq!(parts, vec![vec![1, 2], vec![3, 4], vec![5]]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ShiftConfig::default();
        cfg.dirichlet_alpha = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ShiftConfig::default();
        cfg.test_fraction = 1.0;
        assert!(cfg.validate().is_err());
        let cfg = ShiftConfig {
            mode: ShiftMode::FeatureShift,
            num_groups: 1,
            train_groups: 1,
            ..ShiftConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn target_shift_roles_and_counts() {
        let ds = balanced(200, 10, 3);
        let p = dirichlet_label_partition(&ds, &ShiftConfig::default(), 4).unwrap();
        assert_eq!(p.clients.len(), 40);
        assert_eq!(p.train_participants().count(), 24);
        assert!(p.held_out().all(|c| c.group >= 3));
        let total: usize = p.clients.iter().map(|c| c.train.len() + c.test.len()).sum();
        assert_eq!(total, ds.len());
    }

    #[test]
    fn tiny_dataset_exhausts_retries() {
        let ds = balanced(2, 2, 1);
        let err = dirichlet_label_partition(&ds, &ShiftConfig::default(), 0).unwrap_err();
        assert!(matches!(err, DataError::Partition(_)));
    }

    #[test]
    fn manifest_round_trip() {
        let ds = balanced(50, 4, 2);
        let cfg = ShiftConfig {
            num_groups: 2,
            train_groups: 1,
            clients_per_group: 2,
            ..ShiftConfig::default()
        };
        let p = dirichlet_label_partition(&ds, &cfg, 9).unwrap();
        assert_eq!(ClientPartition::from_manifest(&p.to_manifest()).unwrap(), p);
    }

    #[test]
    fn feature_shift_domain_zero_is_raw() {
        let ds = balanced(60, 10, 4);
        let cfg = ShiftConfig {
            mode: ShiftMode::FeatureShift,
            clients_per_group: 6,
            ..ShiftConfig::default()
        };
        let (shifted, p, transforms) = feature_shift_partition(&ds, &cfg, 2).unwrap();
        assert_eq!(transforms[0], DomainTransform::identity(4));
        assert_eq!(p.clients.len(), 5 * 6 + 5);
        assert_eq!(p.train_participants().count(), 3 * 5);
        // every domain-0 row is one of the raw base rows
        let raw: Vec<&[f64]> = (0..ds.len()).map(|i| ds.features().row_slice(i)).collect();
        let domains = shifted.domains().unwrap();
        for i in (0..shifted.len()).filter(|&i| domains[i] == 0) {
            assert!(raw.contains(&shifted.features().row_slice(i)));
        }
    }
}
