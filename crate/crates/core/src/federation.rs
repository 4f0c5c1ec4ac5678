//! Federated supernet training: data partitioning, per-round client
//! simulation, and masked weighted aggregation.
//!
//! A round samples one architecture mask per client, prunes channels to hit
//! each client's target sparsity, runs the bilevel local search on a copy of
//! the supernet, and folds the masked deltas back in, weighted by sample
//! counts. Clients inside a round are independent and run in parallel; the
//! reduction happens in fixed client order afterwards, so results do not
//! depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    comm_cost, mean_pairwise_distance, min_distance_to_history, overlap_vector,
    subnet_param_count, RoundMetrics,
};
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::micromodel::{
    adam_step, batch_of, clip_gradients, evaluate, gather, gradients, local_search,
    param_support, AdamState, Checkpoint, GradientSet, SearchSpaceConfig, SupernetParams,
    TrainingConfig,
};
use crate::sampling::{init_sampler, next_round_masks, SamplerState, Strategy};
use crate::searchspace::{
    argmax_subnet, compose_masks, ArchMask, ChannelMask, MaskRecord, SparsityBudget, SubnetSpec,
};
use crate::seeds::{derive_seed, Consumer};

/// How each client's target sparsity is chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TargetSparsity {
    /// Every client prunes to the same fraction.
    Uniform(f64),
    /// Explicit per-client fractions; length must equal the client count.
    PerClient(Vec<f64>),
    /// Per-client draws from Normal(mu, sigma^2), clamped to `[0, 0.95]`.
    Heterogeneous { mu: f64, sigma: f64 },
}

/// How the global training set is split across clients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Partitioning {
    /// Random permutation into near-equal shards.
    Iid,
    /// Per-class Dirichlet allocation with the given concentration.
    Dirichlet(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub clients: usize,
    pub rounds: u32,
    pub strategy: Strategy,
    pub s_target: TargetSparsity,
    pub partitioning: Partitioning,
    pub seed: u64,
    pub space: SearchSpaceConfig,
    pub training: TrainingConfig,
    /// Scale on aggregated deltas; 1.0 applies them as-is.
    pub server_coeff: f64,
}

impl ExperimentConfig {
    pub fn new(clients: usize, rounds: u32, strategy: Strategy, seed: u64) -> Self {
        ExperimentConfig {
            clients,
            rounds,
            strategy,
            s_target: TargetSparsity::Uniform(0.5),
            partitioning: Partitioning::Iid,
            seed,
            space: SearchSpaceConfig {
                edges: 6,
                ops_per_edge: 4,
                channels: 16,
                d_in: 8,
                classes: 3,
            },
            training: TrainingConfig::default(),
            server_coeff: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients < 1 {
            return Err(Error::Config("client count must be at least 1".into()));
        }
        let fraction_ok = |s: f64| (0.0..1.0).contains(&s);
        match &self.s_target {
            TargetSparsity::Uniform(s) => {
                if !fraction_ok(*s) {
                    return Err(Error::Config(format!("s_target must be in [0,1), got {s}")));
                }
            }
            TargetSparsity::PerClient(v) => {
                if v.len() != self.clients {
                    return Err(Error::Config(format!(
                        "expected {} per-client sparsity values, got {}",
                        self.clients,
                        v.len()
                    )));
                }
                if let Some(bad) = v.iter().find(|s| !fraction_ok(**s)) {
                    return Err(Error::Config(format!("s_target must be in [0,1), got {bad}")));
                }
            }
            TargetSparsity::Heterogeneous { mu, sigma } => {
                if !fraction_ok(*mu) || !sigma.is_finite() || *sigma < 0.0 {
                    return Err(Error::Config(format!(
                        "heterogeneous sparsity needs mu in [0,1) and sigma >= 0, got ({mu}, {sigma})"
                    )));
                }
            }
        }
        if let Partitioning::Dirichlet(a) = self.partitioning {
            if !(a > 0.0) || !a.is_finite() {
                return Err(Error::Config(format!("alpha_iid must be positive, got {a}")));
            }
        }
        if !self.server_coeff.is_finite() {
            return Err(Error::Config("server coefficient must be finite".into()));
        }
        self.space.validate()?;
        self.training.validate()
    }
}

/// Disjoint per-client index lists covering the global training pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub shards: Vec<Vec<usize>>,
}

impl PartitionSpec {
    pub fn n_total(&self) -> usize {
        self.shards.iter().map(Vec::len).sum()
    }

    /// Every index in `[0, n_total)` assigned exactly once, and every client
    /// holding at least 2 samples.
    pub fn validate(&self, n_total: usize) -> Result<()> {
        let mut seen = vec![false; n_total];
        for shard in &self.shards {
            if shard.len() < 2 {
                return Err(Error::NotEnoughSamples { needed: 2, got: shard.len() });
            }
            for &i in shard {
                if i >= n_total || seen[i] {
                    return Err(Error::Config(format!(
                        "index {i} out of range or assigned twice"
                    )));
                }
                seen[i] = true;
            }
        }
        if seen.iter().any(|&s| !s) {
            return Err(Error::Config("partition does not cover every sample".into()));
        }
        Ok(())
    }
}

/// Split a pool of `n_total` samples into `clients` near-equal random shards
/// (sizes differ by at most one).
pub fn partition_iid(n_total: usize, clients: usize, seed: u64) -> Result<PartitionSpec> {
    if n_total < 2 * clients {
        return Err(Error::NotEnoughSamples { needed: 2 * clients, got: n_total });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n_total).collect();
    // Fisher-Yates
    for i in (1..n_total).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let base = n_total / clients;
    let extra = n_total % clients;
    let mut shards = Vec::with_capacity(clients);
    let mut at = 0;
    for c in 0..clients {
        let size = base + usize::from(c < extra);
        shards.push(order[at..at + size].to_vec());
        at += size;
    }
    Ok(PartitionSpec { shards })
}

/// Round a proportion vector to integer counts summing exactly to `total`:
/// floor every quota, then hand the leftovers to the largest fractional
/// parts (ties to the lowest index).
fn largest_remainder(proportions: &[f64], total: usize) -> Vec<usize> {
    let mut counts: Vec<usize> = Vec::with_capacity(proportions.len());
    let mut fractions: Vec<(f64, usize)> = Vec::with_capacity(proportions.len());
    let mut assigned = 0;
    for (i, &p) in proportions.iter().enumerate() {
        let quota = p * total as f64;
        let base = quota.floor() as usize;
        counts.push(base);
        assigned += base;
        fractions.push((quota - base as f64, i));
    }
    fractions.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for &(_, i) in fractions.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

/// Label-skewed partition: per class, draw client proportions from
/// Dirichlet(alpha_iid) and hand that class's samples out by
/// largest-remainder rounding. Redraws everything up to 100 times if some
/// client lands below 2 samples. Also returns the accepted per-class
/// proportion vectors as `(class, proportions)` pairs.
pub fn partition_dirichlet_detailed(
    labels: &[usize],
    clients: usize,
    alpha_iid: f64,
    seed: u64,
) -> Result<(PartitionSpec, Vec<(usize, Vec<f64>)>)> {
    if !(alpha_iid > 0.0) || !alpha_iid.is_finite() {
        return Err(Error::Config(format!("alpha_iid must be positive, got {alpha_iid}")));
    }
    if labels.len() < 2 * clients {
        return Err(Error::NotEnoughSamples { needed: 2 * clients, got: labels.len() });
    }
    let classes: usize = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha_iid, 1.0)
        .map_err(|e| Error::Config(format!("bad Dirichlet concentration: {e}")))?;
    const ATTEMPTS: usize = 100;
    for _ in 0..ATTEMPTS {
        let mut shards: Vec<Vec<usize>> = vec![Vec::new(); clients];
        let mut draws: Vec<(usize, Vec<f64>)> = Vec::new();
        for (class, members) in by_class.iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let mut p: Vec<f64> = (0..clients).map(|_| gamma.sample(&mut rng)).collect();
            let sum: f64 = p.iter().sum();
            if !(sum > 0.0) || !sum.is_finite() {
                // all draws underflowed; fall back to an even split
                p = vec![1.0 / clients as f64; clients];
            } else {
                for v in &mut p {
                    *v /= sum;
                }
            }
            let counts = largest_remainder(&p, members.len());
            let mut at = 0;
            for (c, &take) in counts.iter().enumerate() {
                shards[c].extend_from_slice(&members[at..at + take]);
                at += take;
            }
            draws.push((class, p));
        }
        if shards.iter().all(|s| s.len() >= 2) {
            for shard in &mut shards {
                shard.sort_unstable();
            }
            return Ok((PartitionSpec { shards }, draws));
        }
    }
    Err(Error::PartitionFailed {
        attempts: ATTEMPTS,
        reason: "a client kept ending up with fewer than 2 samples".into(),
    })
}

pub fn partition_dirichlet(
    labels: &[usize],
    clients: usize,
    alpha_iid: f64,
    seed: u64,
) -> Result<PartitionSpec> {
    partition_dirichlet_detailed(labels, clients, alpha_iid, seed).map(|(spec, _)| spec)
}

/// Per-client sparsity targets drawn from Normal(mu, sigma^2) and clamped to
/// `[0, 0.95]`. A zero sigma returns mu exactly for every client.
pub fn heterogeneous_sparsity(mu: f64, sigma: f64, clients: usize, seed: u64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&mu), "mu must be in [0,1), got {mu}");
    assert!(sigma >= 0.0 && sigma.is_finite(), "sigma must be non-negative, got {sigma}");
    if sigma == 0.0 {
        return vec![mu; clients];
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(mu, sigma).unwrap();
    (0..clients).map(|_| normal.sample(&mut rng).clamp(0.0, 0.95)).collect()
}

/// One client's local view: index lists into the global dataset plus its
/// sparsity target.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub s_target: f64,
}

impl ClientDataset {
    /// Split a shard 50/50 into train/val by alternating positions, which
    /// keeps per-class proportions balanced even when the shard lists its
    /// samples class by class.
    pub fn from_shard(shard: &[usize], s_target: f64) -> Self {
        let train = shard.iter().step_by(2).copied().collect();
        let val = shard.iter().skip(1).step_by(2).copied().collect();
        ClientDataset { train, val, s_target }
    }

    pub fn n_samples(&self) -> usize {
        self.train.len() + self.val.len()
    }
}

/// What a client sends back: deltas (local final minus round start) that are
/// exactly zero outside its mask support, the mask itself, and its sample
/// count for weighting.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub deltas: GradientSet,
    pub subnet: SubnetSpec,
    pub n_samples: usize,
    pub train_loss: f64,
}

impl ClientUpdate {
    /// Check the mask-containment invariant: zero deltas outside support.
    pub fn validate(&self, space: &SearchSpaceConfig) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::Config("client update with no samples".into()));
        }
        let support = param_support(space, &self.subnet);
        let pairs: [(&[f64], &[bool]); 5] = [
            (&self.deltas.op_w, &support.op_w),
            (&self.deltas.op_b, &support.op_b),
            (&self.deltas.alpha, &support.alpha),
            (&self.deltas.head_w, &support.head_w),
            (&self.deltas.head_b, &support.head_b),
        ];
        for (delta, sup) in pairs {
            if delta.len() != sup.len() {
                return Err(Error::DimensionMismatch("update shape vs mask support".into()));
            }
            if delta.iter().zip(sup).any(|(d, &s)| !s && d.to_bits() != 0) {
                return Err(Error::Config("delta leaks outside mask support".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    pub supernet: SupernetParams,
    pub sampler: SamplerState,
    pub round: u32,
    pub metrics: Vec<RoundMetrics>,
    pub mask_log: Vec<MaskRecord>,
}

/// Prune channels for the sampled mask, run the bilevel local search on the
/// client's splits, and package the masked delta against `supernet`.
pub fn simulate_client(
    supernet: &SupernetParams,
    ds: &Dataset,
    client: &ClientDataset,
    arch: ArchMask,
    training: &TrainingConfig,
) -> Result<(ClientUpdate, SparsityBudget)> {
    let budget = SparsityBudget::for_mask(client.s_target, &arch)?;
    let channel = crate::searchspace::make_channel_mask(budget.s_channel, supernet.space.channels);
    let subnet = compose_masks(arch, channel);
    let (local, train_loss) =
        local_search(supernet, &subnet, ds, &client.train, &client.val, training)?;
    let support = param_support(&supernet.space, &subnet);

    let mut deltas = GradientSet::zeros(&supernet.space);
    let fields: [(&[f64], &[f64], &[bool], &mut Vec<f64>); 5] = [
        (&local.op_w, &supernet.op_w, &support.op_w, &mut deltas.op_w),
        (&local.op_b, &supernet.op_b, &support.op_b, &mut deltas.op_b),
        (&local.alpha, &supernet.alpha, &support.alpha, &mut deltas.alpha),
        (&local.head_w, &supernet.head_w, &support.head_w, &mut deltas.head_w),
        (&local.head_b, &supernet.head_b, &support.head_b, &mut deltas.head_b),
    ];
    for (after, before, sup, out) in fields {
        for i in 0..after.len() {
            if sup[i] {
                out[i] = after[i] - before[i];
            }
        }
    }
    let update =
        ClientUpdate { deltas, subnet, n_samples: client.n_samples(), train_loss };
    Ok((update, budget))
}

/// Fold client deltas into the supernet: each position gains
/// `coeff * (N_c / N) * delta` from every client whose mask covers it,
/// summed in client-index order. Positions outside every mask come back
/// bit-identical.
pub fn aggregate(
    supernet: &SupernetParams,
    updates: &[ClientUpdate],
    n_total: usize,
    coeff: f64,
) -> Result<SupernetParams> {
    let mut out = supernet.clone();
    for u in updates {
        if u.n_samples > n_total {
            return Err(Error::Config(format!(
                "client claims {} of {} samples",
                u.n_samples, n_total
            )));
        }
        let w = coeff * (u.n_samples as f64 / n_total as f64);
        let support = param_support(&supernet.space, &u.subnet);
        let fields: [(&mut Vec<f64>, &[f64], &[bool]); 5] = [
            (&mut out.op_w, &u.deltas.op_w, &support.op_w),
            (&mut out.op_b, &u.deltas.op_b, &support.op_b),
            (&mut out.alpha, &u.deltas.alpha, &support.alpha),
            (&mut out.head_w, &u.deltas.head_w, &support.head_w),
            (&mut out.head_b, &u.deltas.head_b, &support.head_b),
        ];
        for (target, delta, sup) in fields {
            if target.len() != delta.len() {
                return Err(Error::DimensionMismatch("update shape vs supernet".into()));
            }
            for i in 0..target.len() {
                if sup[i] {
                    target[i] += w * delta[i];
                }
            }
        }
    }
    Ok(out)
}

/// The subnet that keeps only the top-scoring op on each edge, at full
/// channel width.
pub fn argmax_spec(params: &SupernetParams) -> SubnetSpec {
    let space = params.space;
    let choices = argmax_subnet(&params.alpha, space.edges, space.ops_per_edge);
    let mut bits = vec![false; space.n()];
    for (e, &k) in choices.iter().enumerate() {
        bits[e * space.ops_per_edge + k] = true;
    }
    compose_masks(ArchMask::new(bits), ChannelMask::full(space.channels))
}

/// Modeled round duration: the slowest client's optimizer-step count times
/// its active parameter count, at a nominal thousand parameter-steps per
/// millisecond. Modeled rather than measured so reruns stay byte-identical.
fn modeled_round_millis(
    clients: &[ClientDataset],
    subnets: &[SubnetSpec],
    space: &SearchSpaceConfig,
    training: &TrainingConfig,
) -> u64 {
    let mut worst = 0usize;
    for (cd, sn) in clients.iter().zip(subnets) {
        let nb_t = cd.train.len().div_ceil(training.batch_size);
        let nb_v = cd.val.len().div_ceil(training.batch_size);
        let steps = training.local_epochs * nb_t.max(nb_v);
        worst = worst.max(steps * subnet_param_count(sn, space));
    }
    (worst as u64).div_ceil(1000)
}

/// One synchronous round: sample C masks, simulate every client in parallel
/// on a copy of the supernet, aggregate in client order, evaluate, and
/// append metrics and mask records to the state.
pub fn run_round(
    state: &mut ServerState,
    ds: &Dataset,
    clients: &[ClientDataset],
    cfg: &ExperimentConfig,
) -> Result<RoundMetrics> {
    let prior_history = state.sampler.history.len();
    let masks = next_round_masks(&mut state.sampler);
    let history = &state.sampler.history[..prior_history];

    let mut min_hist = state.sampler.n;
    for m in &masks {
        min_hist = min_hist.min(min_distance_to_history(m, history)?);
    }
    let mean_pair =
        if masks.len() < 2 { 0.0 } else { mean_pairwise_distance(&masks)? };
    let overlap = overlap_vector(&masks)?;

    let supernet = &state.supernet;
    let results: Vec<Result<(ClientUpdate, SparsityBudget)>> = clients
        .par_iter()
        .zip(masks.par_iter().cloned())
        .map(|(client, arch)| simulate_client(supernet, ds, client, arch, &cfg.training))
        .collect();
    let mut updates = Vec::with_capacity(clients.len());
    for (res, mask) in results.into_iter().zip(&masks) {
        let (update, budget) = res?;
        state.mask_log.push(MaskRecord::new(mask, budget));
        updates.push(update);
    }

    let n_total: usize = updates.iter().map(|u| u.n_samples).sum();
    state.supernet = aggregate(&state.supernet, &updates, n_total, cfg.server_coeff)?;

    let subnets: Vec<SubnetSpec> = updates.iter().map(|u| u.subnet.clone()).collect();
    let metrics = RoundMetrics {
        round: state.round + 1,
        supernet_test_acc: evaluate(&state.supernet, None, ds, &ds.test)?,
        argmax_test_acc: evaluate(&state.supernet, Some(&argmax_spec(&state.supernet)), ds, &ds.test)?,
        mean_client_train_loss: updates.iter().map(|u| u.train_loss).sum::<f64>()
            / updates.len() as f64,
        min_hamming_to_history: min_hist,
        mean_pairwise_hamming: mean_pair,
        overlap,
        avg_comm_params: comm_cost(&subnets, &cfg.space),
        wall_ms: modeled_round_millis(clients, &subnets, &cfg.space, &cfg.training),
    };
    state.round += 1;
    state.metrics.push(metrics.clone());
    Ok(metrics)
}

/// Partition the training pool and attach per-client sparsity targets, all
/// deterministically derived from the experiment seed.
pub fn build_clients(cfg: &ExperimentConfig, ds: &Dataset) -> Result<Vec<ClientDataset>> {
    let spec = match cfg.partitioning {
        Partitioning::Iid => partition_iid(
            ds.train.len(),
            cfg.clients,
            derive_seed(cfg.seed, Consumer::Partitioner),
        )?,
        Partitioning::Dirichlet(alpha) => {
            let labels: Vec<usize> = ds.train.iter().map(|&i| ds.labels[i]).collect();
            partition_dirichlet(
                &labels,
                cfg.clients,
                alpha,
                derive_seed(cfg.seed, Consumer::Partitioner),
            )?
        }
    };
    let targets = match &cfg.s_target {
        TargetSparsity::Uniform(s) => vec![*s; cfg.clients],
        TargetSparsity::PerClient(v) => v.clone(),
        TargetSparsity::Heterogeneous { mu, sigma } => heterogeneous_sparsity(
            *mu,
            *sigma,
            cfg.clients,
            derive_seed(cfg.seed, Consumer::Sparsity),
        ),
    };
    Ok(spec
        .shards
        .iter()
        .zip(targets)
        .map(|(shard, s)| {
            // shard indices point into ds.train; map to dataset rows
            let rows: Vec<usize> = shard.iter().map(|&i| ds.train[i]).collect();
            ClientDataset::from_shard(&rows, s)
        })
        .collect())
}

/// Everything a finished experiment produces: the server state plus the
/// serialized artifacts in their on-disk formats.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub state: ServerState,
    pub metrics_csv: String,
    pub mask_log: String,
    pub checkpoint: Checkpoint,
}

fn fresh_state(cfg: &ExperimentConfig) -> Result<ServerState> {
    Ok(ServerState {
        supernet: SupernetParams::init(cfg.space, derive_seed(cfg.seed, Consumer::Initializer))?,
        sampler: init_sampler(
            cfg.strategy,
            cfg.space.n(),
            cfg.clients,
            derive_seed(cfg.seed, Consumer::Sampler),
        ),
        round: 0,
        metrics: Vec::new(),
        mask_log: Vec::new(),
    })
}

fn finish(state: ServerState) -> ExperimentOutput {
    let metrics_csv = crate::analysis::metrics_to_csv(&state.metrics);
    let mask_log = crate::searchspace::mask_log_to_jsonl(&state.mask_log);
    let checkpoint = Checkpoint::from_params(&state.supernet, state.round);
    ExperimentOutput { state, metrics_csv, mask_log, checkpoint }
}

fn run_rounds(
    state: &mut ServerState,
    cfg: &ExperimentConfig,
    ds: &Dataset,
    clients: &[ClientDataset],
) -> Result<()> {
    while state.round < cfg.rounds {
        run_round(state, ds, clients, cfg)?;
    }
    Ok(())
}

/// Run the full experiment from a fresh initialization. The test split
/// stays at the server: clients only ever see their own training shard.
pub fn run_experiment(cfg: &ExperimentConfig, ds: &Dataset) -> Result<ExperimentOutput> {
    cfg.validate()?;
    ds.validate()?;
    if ds.test.is_empty() {
        return Err(Error::EmptySplit("held-out test set".into()));
    }
    let clients = build_clients(cfg, ds)?;
    let mut state = fresh_state(cfg)?;
    run_rounds(&mut state, cfg, ds, &clients)?;
    Ok(finish(state))
}

/// Continue an interrupted experiment from its checkpoint. The sampler is
/// rebuilt by replaying the already-completed rounds (mask draws are
/// independent of training), so rounds k+1..R come out identical to an
/// uninterrupted run; metrics and mask records cover only the new rounds.
pub fn resume_experiment(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    checkpoint: Checkpoint,
) -> Result<ExperimentOutput> {
    cfg.validate()?;
    ds.validate()?;
    if ds.test.is_empty() {
        return Err(Error::EmptySplit("held-out test set".into()));
    }
    let (supernet, done) = checkpoint.into_params()?;
    if supernet.space != cfg.space {
        return Err(Error::Checkpoint("checkpoint was built for a different search space".into()));
    }
    if done > cfg.rounds {
        return Err(Error::Checkpoint(format!(
            "checkpoint is at round {done}, past the configured {}",
            cfg.rounds
        )));
    }
    let clients = build_clients(cfg, ds)?;
    let mut state = fresh_state(cfg)?;
    state.supernet = supernet;
    state.round = done;
    for _ in 0..done {
        next_round_masks(&mut state.sampler);
    }
    run_rounds(&mut state, cfg, ds, &clients)?;
    Ok(finish(state))
}

/// Post-search hook: train only the weights of the argmax subnet on one
/// client's full local data, with the architecture scores frozen. Returns
/// the tuned parameters and their test accuracy on the held-out split.
pub fn finetune_argmax(
    supernet: &SupernetParams,
    ds: &Dataset,
    client: &ClientDataset,
    epochs: usize,
    training: &TrainingConfig,
) -> Result<(SupernetParams, f64)> {
    let subnet = argmax_spec(supernet);
    let support = param_support(&supernet.space, &subnet);
    let mut params = supernet.clone();
    let mut idx: Vec<usize> = client.train.iter().chain(&client.val).copied().collect();
    idx.sort_unstable();
    if idx.is_empty() {
        return Err(Error::EmptySplit("finetune data".into()));
    }
    let w_len = params.op_w.len() + params.op_b.len() + params.head_w.len() + params.head_b.len();
    let mut w_state = AdamState::new(w_len, training);
    let nb = idx.len().div_ceil(training.batch_size);
    for _ in 0..epochs {
        for b in 0..nb {
            let (x, y) = gather(ds, batch_of(&idx, training.batch_size, b));
            let g = gradients(&params, &subnet, &x, &y)?;
            let g = clip_gradients(g.weights_only(), training.clip_threshold);
            adam_step(
                &mut [
                    &mut params.op_w,
                    &mut params.op_b,
                    &mut params.head_w,
                    &mut params.head_b,
                ],
                &[&g.op_w, &g.op_b, &g.head_w, &g.head_b],
                &[&support.op_w, &support.op_b, &support.head_w, &support.head_b],
                &mut w_state,
                training.lr_w,
                training.weight_decay_w,
            );
        }
    }
    let acc = evaluate(&params, Some(&subnet), ds, &ds.test)?;
    Ok((params, acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::gen_blobs;

    fn tiny_space() -> SearchSpaceConfig {
        SearchSpaceConfig { edges: 1, ops_per_edge: 2, channels: 2, d_in: 1, classes: 2 }
    }

    fn tiny_cfg(clients: usize, rounds: u32, strategy: Strategy, seed: u64) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(clients, rounds, strategy, seed);
        cfg.space = SearchSpaceConfig { edges: 2, ops_per_edge: 2, channels: 4, d_in: 3, classes: 2 };
        cfg.training.local_epochs = 1;
        cfg.training.batch_size = 8;
        cfg
    }

    fn tiny_blobs(seed: u64) -> Dataset {
        gen_blobs(2, 24, 3, 0.3, seed)
    }

    #[test]
    fn iid_partition_makes_near_equal_disjoint_shards() {
        let spec = partition_iid(800, 8, 11).unwrap();
        assert!(spec.shards.iter().all(|s| s.len() == 100));
        spec.validate(800).unwrap();

        let ragged = partition_iid(805, 8, 11).unwrap();
        let mut sizes: Vec<usize> = ragged.shards.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![100, 100, 100, 101, 101, 101, 101, 101]);
        ragged.validate(805).unwrap();

        assert!(matches!(
            partition_iid(10, 8, 11),
            Err(Error::NotEnoughSamples { needed: 16, got: 10 })
        ));
    }

    #[test]
    fn iid_partition_is_seeded() {
        let a = partition_iid(100, 4, 5).unwrap();
        let b = partition_iid(100, 4, 5).unwrap();
        let c = partition_iid(100, 4, 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    fn block_labels(classes: usize, per_class: usize) -> Vec<usize> {
        (0..classes).flat_map(|k| std::iter::repeat_n(k, per_class)).collect()
    }

    #[test]
    fn dirichlet_partition_conserves_samples() {
        let labels = block_labels(3, 100);
        let (spec, draws) = partition_dirichlet_detailed(&labels, 8, 0.5, 21).unwrap();
        assert_eq!(spec.n_total(), 300);
        spec.validate(300).unwrap();
        assert_eq!(draws.len(), 3);
        for (_, p) in &draws {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dirichlet_counts_track_drawn_proportions() {
        let labels = block_labels(3, 100);
        let (spec, draws) = partition_dirichlet_detailed(&labels, 8, 0.5, 33).unwrap();
        for (class, p) in &draws {
            for (c, shard) in spec.shards.iter().enumerate() {
                let count = shard.iter().filter(|&&i| labels[i] == *class).count();
                let quota = p[c] * 100.0;
                assert!(
                    (count as f64 - quota).abs() <= 1.0,
                    "class {class} client {c}: {count} vs quota {quota}"
                );
            }
        }
    }

    #[test]
    fn dirichlet_high_alpha_approaches_uniform() {
        let labels = block_labels(3, 800);
        for seed in [1, 2, 3, 4, 5] {
            let spec = partition_dirichlet(&labels, 8, 1e6, seed).unwrap();
            for shard in &spec.shards {
                for class in 0..3 {
                    let count = shard.iter().filter(|&&i| labels[i] == class).count();
                    let rel = (count as f64 - 100.0).abs() / 100.0;
                    assert!(rel <= 0.05, "seed {seed}: count {count} off by {rel}");
                }
            }
        }
    }

    #[test]
    fn dirichlet_low_alpha_skews_client_composition() {
        let labels = block_labels(3, 100);
        for seed in [1, 2, 3, 4, 5] {
            let spec = partition_dirichlet(&labels, 8, 0.1, seed).unwrap();
            let skewed = spec.shards.iter().any(|shard| {
                (0..3).any(|class| {
                    let count = shard.iter().filter(|&&i| labels[i] == class).count();
                    count as f64 > 0.6 * shard.len() as f64
                })
            });
            assert!(skewed, "seed {seed}: no client dominated by one class");
        }
    }

    #[test]
    fn sparsity_draws_respect_clamp_and_degenerate_sigma() {
        let flat = heterogeneous_sparsity(0.5, 0.0, 8, 3);
        assert!(flat.iter().all(|&s| s == 0.5));

        for seed in 0..10 {
            let draws = heterogeneous_sparsity(0.5, 0.2, 8, seed);
            assert!(draws.iter().all(|&s| (0.0..=0.95).contains(&s)));
            let mean = draws.iter().sum::<f64>() / draws.len() as f64;
            assert!((mean - 0.5).abs() < 0.25, "seed {seed}: mean {mean}");

            let high = heterogeneous_sparsity(0.9, 0.2, 8, seed);
            assert!(high.iter().all(|&s| s <= 0.95));
        }
    }

    /// Delta of +1 on two disjoint single-op masks with equal weights 1/2:
    /// every op position covered once gains exactly 0.5, the always-shared
    /// head gains exactly 1.0.
    #[test]
    fn aggregate_matches_hand_computed_toy() {
        let space = tiny_space();
        let base = SupernetParams::init(space, 7).unwrap();
        let make = |bits: Vec<bool>| {
            let subnet = compose_masks(ArchMask::new(bits), ChannelMask::full(space.channels));
            let support = param_support(&space, &subnet);
            let mut deltas = GradientSet::zeros(&space);
            for (d, s) in [
                (&mut deltas.op_w, &support.op_w),
                (&mut deltas.op_b, &support.op_b),
                (&mut deltas.alpha, &support.alpha),
                (&mut deltas.head_w, &support.head_w),
                (&mut deltas.head_b, &support.head_b),
            ] {
                for i in 0..d.len() {
                    if s[i] {
                        d[i] = 1.0;
                    }
                }
            }
            ClientUpdate { deltas, subnet, n_samples: 4, train_loss: 0.0 }
        };
        let out = aggregate(
            &base,
            &[make(vec![true, false]), make(vec![false, true])],
            8,
            1.0,
        )
        .unwrap();
        // disjoint full-width masks cover every op position exactly once
        for i in 0..base.op_w.len() {
            assert_eq!(out.op_w[i], base.op_w[i] + 0.5);
        }
        for i in 0..base.op_b.len() {
            assert_eq!(out.op_b[i], base.op_b[i] + 0.5);
        }
        for i in 0..base.alpha.len() {
            assert_eq!(out.alpha[i], base.alpha[i] + 0.5);
        }
        // both clients always ship the head
        for i in 0..base.head_w.len() {
            assert_eq!(out.head_w[i], base.head_w[i] + 1.0);
        }
        for i in 0..base.head_b.len() {
            assert_eq!(out.head_b[i], base.head_b[i] + 1.0);
        }
    }

    #[test]
    fn aggregate_single_full_client_adds_delta() {
        let space = tiny_space();
        let base = SupernetParams::init(space, 9).unwrap();
        let subnet = SubnetSpec::full(space.n(), space.channels);
        let mut deltas = GradientSet::zeros(&space);
        for (i, v) in deltas.op_w.iter_mut().enumerate() {
            *v = 0.25 * (i as f64 + 1.0);
        }
        deltas.alpha[1] = -3.0;
        deltas.head_b[0] = 0.125;
        let update = ClientUpdate { deltas: deltas.clone(), subnet, n_samples: 10, train_loss: 0.0 };
        let out = aggregate(&base, &[update], 10, 1.0).unwrap();
        for i in 0..base.op_w.len() {
            assert_eq!(out.op_w[i], base.op_w[i] + deltas.op_w[i]);
        }
        assert_eq!(out.alpha[1], base.alpha[1] - 3.0);
        assert_eq!(out.head_b[0], base.head_b[0] + 0.125);
    }

    fn random_update(space: &SearchSpaceConfig, rng: &mut ChaCha8Rng) -> ClientUpdate {
        let bits: Vec<bool> = (0..space.n()).map(|_| rng.random_bool(0.6)).collect();
        let arch = if bits.iter().any(|&b| b) {
            ArchMask::new(bits)
        } else {
            ArchMask::ones(space.n())
        };
        let keep = rng.random_range(1..=space.channels);
        let subnet = compose_masks(arch, ChannelMask { active_count: keep, n_c: space.channels });
        let support = param_support(space, &subnet);
        let mut deltas = GradientSet::zeros(space);
        for (d, s) in [
            (&mut deltas.op_w, &support.op_w),
            (&mut deltas.op_b, &support.op_b),
            (&mut deltas.alpha, &support.alpha),
            (&mut deltas.head_w, &support.head_w),
            (&mut deltas.head_b, &support.head_b),
        ] {
            for i in 0..d.len() {
                if s[i] {
                    d[i] = rng.random_range(-1.0..1.0);
                }
            }
        }
        let n_samples = rng.random_range(1..=40);
        ClientUpdate { deltas, subnet, n_samples, train_loss: 0.0 }
    }

    #[test]
    fn aggregation_is_linear_over_update_batches() {
        let space = SearchSpaceConfig { edges: 2, ops_per_edge: 3, channels: 3, d_in: 2, classes: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let base = SupernetParams::init(space, 1).unwrap();
        for _ in 0..10 {
            let updates: Vec<ClientUpdate> =
                (0..6).map(|_| random_update(&space, &mut rng)).collect();
            let n_total: usize = updates.iter().map(|u| u.n_samples).sum();
            let whole = aggregate(&base, &updates, n_total, 1.0).unwrap();
            let first = aggregate(&base, &updates[..3], n_total, 1.0).unwrap();
            let split = aggregate(&first, &updates[3..], n_total, 1.0).unwrap();
            for (a, b) in [
                (&whole.op_w, &split.op_w),
                (&whole.op_b, &split.op_b),
                (&whole.alpha, &split.alpha),
                (&whole.head_w, &split.head_w),
                (&whole.head_b, &split.head_b),
            ] {
                for i in 0..a.len() {
                    assert!((a[i] - b[i]).abs() < 1e-12, "position {i}: {} vs {}", a[i], b[i]);
                }
            }
        }
    }

    #[test]
    fn aggregate_leaves_unmasked_positions_bit_identical() {
        let space = SearchSpaceConfig { edges: 2, ops_per_edge: 3, channels: 3, d_in: 2, classes: 2 };
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut base = SupernetParams::init(space, 2).unwrap();
        // negative zero must survive aggregation untouched
        base.op_w[0] = -0.0;
        base.op_b[3] = -0.0;
        for _ in 0..20 {
            let updates: Vec<ClientUpdate> =
                (0..4).map(|_| random_update(&space, &mut rng)).collect();
            let n_total: usize = updates.iter().map(|u| u.n_samples).sum();
            let supports: Vec<_> =
                updates.iter().map(|u| param_support(&space, &u.subnet)).collect();
            let out = aggregate(&base, &updates, n_total, 1.0).unwrap();
            let fields: [(&[f64], &[f64], Box<dyn Fn(&crate::micromodel::ParamSupport) -> &[bool]>); 3] = [
                (&base.op_w, &out.op_w, Box::new(|s| &s.op_w)),
                (&base.op_b, &out.op_b, Box::new(|s| &s.op_b)),
                (&base.alpha, &out.alpha, Box::new(|s| &s.alpha)),
            ];
            for (before, after, pick) in fields {
                for i in 0..before.len() {
                    if supports.iter().all(|s| !pick(s)[i]) {
                        assert_eq!(before[i].to_bits(), after[i].to_bits(), "position {i} moved");
                    }
                }
            }
        }
    }

    #[test]
    fn client_updates_stay_inside_mask_support() {
        let ds = tiny_blobs(5);
        let cfg = tiny_cfg(2, 1, Strategy::Random, 17);
        let clients = build_clients(&cfg, &ds).unwrap();
        let supernet = SupernetParams::init(cfg.space, 3).unwrap();
        let arch = ArchMask::new(
            (0..cfg.space.n()).map(|i| i % 2 == 0).collect(),
        );
        let (update, budget) =
            simulate_client(&supernet, &ds, &clients[0], arch, &cfg.training).unwrap();
        update.validate(&cfg.space).unwrap();
        assert_eq!(update.n_samples, clients[0].n_samples());
        assert!((budget.s_arch - 0.5).abs() < 1e-12);
        assert!(update.train_loss.is_finite());
        // something must have moved inside the support
        assert!(update.deltas.l2_norm() > 0.0);
    }

    #[test]
    fn full_participation_weights_sum_to_one() {
        let spec = partition_iid(803, 7, 19).unwrap();
        let total: usize = spec.shards.iter().map(Vec::len).sum();
        assert_eq!(total, 803);
        // integer counts make the rational weight sum exactly 1
        let weight_sum: f64 = spec.shards.iter().map(|s| s.len() as f64 / total as f64).sum();
        assert!((weight_sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn round_metrics_are_deterministic_across_runs() {
        let ds = tiny_blobs(8);
        let cfg = tiny_cfg(3, 2, Strategy::Diversified, 23);
        let a = run_experiment(&cfg, &ds).unwrap();
        let b = run_experiment(&cfg, &ds).unwrap();
        assert_eq!(a.state.metrics, b.state.metrics);
        assert_eq!(a.metrics_csv, b.metrics_csv);
        assert_eq!(a.mask_log, b.mask_log);
        let bits = |p: &SupernetParams| -> Vec<u64> {
            p.op_w.iter().chain(&p.op_b).chain(&p.alpha).chain(&p.head_w).chain(&p.head_b)
                .map(|v| v.to_bits())
                .collect()
        };
        assert_eq!(bits(&a.state.supernet), bits(&b.state.supernet));
    }

    #[test]
    fn single_client_round_reduces_to_centralized_search() {
        let ds = tiny_blobs(4);
        let mut cfg = tiny_cfg(1, 1, Strategy::NoSampling, 31);
        cfg.s_target = TargetSparsity::Uniform(0.0);
        let clients = build_clients(&cfg, &ds).unwrap();
        let mut state = fresh_state(&cfg).unwrap();
        let start = state.supernet.clone();
        run_round(&mut state, &ds, &clients, &cfg).unwrap();

        let subnet = SubnetSpec::full(cfg.space.n(), cfg.space.channels);
        let (direct, _) =
            local_search(&start, &subnet, &ds, &clients[0].train, &clients[0].val, &cfg.training)
                .unwrap();
        for (a, b) in [
            (&state.supernet.op_w, &direct.op_w),
            (&state.supernet.op_b, &direct.op_b),
            (&state.supernet.alpha, &direct.alpha),
            (&state.supernet.head_w, &direct.head_w),
            (&state.supernet.head_b, &direct.head_b),
        ] {
            for i in 0..a.len() {
                // x + 1.0*(y - x) recovers y up to one rounding of the subtraction
                assert!((a[i] - b[i]).abs() <= 1e-12 * b[i].abs().max(1.0));
            }
        }
    }

    #[test]
    fn zero_round_experiment_returns_initialization() {
        let ds = tiny_blobs(6);
        let cfg = tiny_cfg(2, 0, Strategy::Random, 41);
        let out = run_experiment(&cfg, &ds).unwrap();
        assert!(out.state.metrics.is_empty());
        assert!(out.mask_log.is_empty());
        assert_eq!(out.metrics_csv.lines().count(), 1);
        let init =
            SupernetParams::init(cfg.space, derive_seed(cfg.seed, Consumer::Initializer)).unwrap();
        assert_eq!(out.state.supernet.op_w, init.op_w);
        assert_eq!(out.state.supernet.alpha, init.alpha);
        assert_eq!(out.checkpoint.round, 0);
    }

    #[test]
    fn resume_reproduces_the_uninterrupted_run() {
        let ds = tiny_blobs(12);
        let cfg = tiny_cfg(2, 4, Strategy::Diversified, 56);
        let full = run_experiment(&cfg, &ds).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.rounds = 2;
        let half = run_experiment(&half_cfg, &ds).unwrap();
        let resumed = resume_experiment(&cfg, &ds, half.checkpoint).unwrap();

        assert_eq!(resumed.state.metrics.len(), 2);
        assert_eq!(full.state.metrics[2..], resumed.state.metrics[..]);
        assert_eq!(full.state.mask_log[4..], resumed.state.mask_log[..]);
        let final_full = serde_json::to_string(&full.checkpoint).unwrap();
        let final_resumed = serde_json::to_string(&resumed.checkpoint).unwrap();
        assert_eq!(final_full, final_resumed);
    }

    #[test]
    fn resume_rejects_mismatched_space_or_round() {
        let ds = tiny_blobs(3);
        let cfg = tiny_cfg(2, 1, Strategy::Random, 61);
        let out = run_experiment(&cfg, &ds).unwrap();

        let mut other = cfg.clone();
        other.space.channels += 1;
        assert!(matches!(
            resume_experiment(&other, &ds, out.checkpoint.clone()),
            Err(Error::Checkpoint(_))
        ));

        let mut shorter = cfg.clone();
        shorter.rounds = 0;
        assert!(matches!(
            resume_experiment(&shorter, &ds, out.checkpoint),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn finetune_trains_weights_but_freezes_architecture() {
        let ds = tiny_blobs(14);
        let cfg = tiny_cfg(2, 1, Strategy::NoSampling, 71);
        let clients = build_clients(&cfg, &ds).unwrap();
        let supernet = SupernetParams::init(cfg.space, 5).unwrap();
        let (tuned, acc) =
            finetune_argmax(&supernet, &ds, &clients[0], 2, &cfg.training).unwrap();
        assert_eq!(tuned.alpha, supernet.alpha, "architecture scores must not move");
        assert!(tuned.head_w != supernet.head_w, "head weights should train");
        assert!((0.0..=1.0).contains(&acc));
        // off-argmax op weights stay put
        let spec = argmax_spec(&supernet);
        let support = param_support(&cfg.space, &spec);
        for i in 0..tuned.op_w.len() {
            if !support.op_w[i] {
                assert_eq!(tuned.op_w[i].to_bits(), supernet.op_w[i].to_bits());
            }
        }
    }

    #[test]
    fn config_validation_names_the_problem() {
        let ds = tiny_blobs(2);
        let mut cfg = tiny_cfg(0, 1, Strategy::Random, 1);
        assert!(run_experiment(&cfg, &ds).is_err());

        cfg = tiny_cfg(2, 1, Strategy::Random, 1);
        cfg.s_target = TargetSparsity::Uniform(1.0);
        assert!(matches!(run_experiment(&cfg, &ds), Err(Error::Config(_))));

        cfg = tiny_cfg(2, 1, Strategy::Random, 1);
        cfg.s_target = TargetSparsity::PerClient(vec![0.5]);
        assert!(matches!(run_experiment(&cfg, &ds), Err(Error::Config(_))));

        cfg = tiny_cfg(2, 1, Strategy::Random, 1);
        cfg.partitioning = Partitioning::Dirichlet(0.0);
        assert!(matches!(run_experiment(&cfg, &ds), Err(Error::Config(_))));
    }

    #[test]
    fn heterogeneous_targets_give_clients_different_budgets() {
        let ds = tiny_blobs(9);
        let mut cfg = tiny_cfg(4, 1, Strategy::NoSampling, 83);
        cfg.s_target = TargetSparsity::Heterogeneous { mu: 0.5, sigma: 0.2 };
        let clients = build_clients(&cfg, &ds).unwrap();
        let targets: Vec<f64> = clients.iter().map(|c| c.s_target).collect();
        assert!(targets.windows(2).any(|w| w[0] != w[1]), "draws all equal: {targets:?}");
        assert!(targets.iter().all(|&s| (0.0..=0.95).contains(&s)));

        let out = run_experiment(&cfg, &ds).unwrap();
        let s_channels: Vec<f64> = out.state.mask_log.iter().map(|r| r.s_channel).collect();
        assert!(s_channels.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn wall_ms_scales_with_subnet_size() {
        let space = SearchSpaceConfig { edges: 6, ops_per_edge: 4, channels: 16, d_in: 8, classes: 3 };
        let training = TrainingConfig::default();
        let clients = vec![ClientDataset {
            train: (0..64).collect(),
            val: (64..128).collect(),
            s_target: 0.0,
        }];
        let full = vec![SubnetSpec::full(space.n(), space.channels)];
        let bits: Vec<bool> = (0..space.n()).map(|i| i % 4 == 0).collect();
        let quarter = vec![compose_masks(
            ArchMask::new(bits),
            ChannelMask { active_count: 8, n_c: 16 },
        )];
        let t_full = modeled_round_millis(&clients, &full, &space, &training);
        let t_quarter = modeled_round_millis(&clients, &quarter, &space, &training);
        assert!(t_full > t_quarter);
        assert!(t_quarter > 0);
    }
}
