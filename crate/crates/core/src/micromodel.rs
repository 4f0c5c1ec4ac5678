//! Desk-scale differentiable supernet.
//!
//! Topology is a chain: a fixed (non-learned) linear lift `d_in -> n_c`,
//! then `E` mixed edges, then a learned classification head. Each mixed edge
//! blends `K` candidate operations — identity, affine+relu, affine+tanh, and
//! an elementwise learned scale — weighted by a softmax over the
//! architecture parameters of the ACTIVE ops only; masked ops are excluded
//! from the partition function and a fully masked edge degrades to identity.
//! The channel mask zeroes trailing hidden coordinates of every op output.
//!
//! Gradients are exact reverse-mode derivations of this forward pass, not an
//! autodiff tape; `finite_diff_check` is the standing oracle against them.
//! All arithmetic is f64 with a fixed accumulation order (sample-major,
//! edge-major, op-minor) so results are bit-reproducible.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::searchspace::SubnetSpec;
use crate::seeds::splitmix64;

/// Shape of the supernet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpaceConfig {
    pub edges: usize,
    pub ops_per_edge: usize,
    /// Hidden width n_c.
    pub channels: usize,
    pub d_in: usize,
    pub classes: usize,
}

impl SearchSpaceConfig {
    /// Mask length: one bit per operation slot.
    pub fn n(&self) -> usize {
        self.edges * self.ops_per_edge
    }

    pub fn validate(&self) -> Result<()> {
        if self.edges < 1 {
            return Err(Error::Config("edges must be at least 1".into()));
        }
        if self.ops_per_edge < 2 {
            return Err(Error::Config("ops per edge must be at least 2".into()));
        }
        if self.channels < 2 {
            return Err(Error::Config("channel width must be at least 2".into()));
        }
        if self.d_in < 1 || self.classes < 2 {
            return Err(Error::Config("need d_in >= 1 and classes >= 2".into()));
        }
        Ok(())
    }
}

/// Local-search hyperparameters. Defaults are the reference values used by
/// every experiment unless overridden.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub lr_w: f64,
    pub lr_alpha: f64,
    /// Weight of the validation loss in the architecture gradient.
    pub lambda_val: f64,
    pub clip_threshold: f64,
    pub weight_decay_w: f64,
    pub weight_decay_alpha: f64,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr_w: 0.001,
            lr_alpha: 3e-4,
            lambda_val: 1.0,
            clip_threshold: 0.5,
            weight_decay_w: 3e-4,
            weight_decay_alpha: 1e-3,
            local_epochs: 5,
            batch_size: 32,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("lr_w", self.lr_w),
            ("lr_alpha", self.lr_alpha),
            ("clip", self.clip_threshold),
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positives {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.lambda_val < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda_val)));
        }
        if self.weight_decay_w < 0.0 || self.weight_decay_alpha < 0.0 {
            return Err(Error::Config("weight decay must be >= 0".into()));
        }
        if self.local_epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("epochs and batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Fixed input lift, a pure function of (d_in, n_c): entries N(0,1)/sqrt(d_in)
/// from a constant-seeded stream, laid out input-major
/// (`embed[j * n_c + i]`). Because it never trains and never depends on the
/// experiment seed, a checkpoint alone reconstructs the forward pass.
pub fn embed_matrix(d_in: usize, n_c: usize) -> Vec<f64> {
    let seed = splitmix64(0x454D_4245 ^ ((d_in as u64) << 32) ^ n_c as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let scale = 1.0 / (d_in as f64).sqrt();
    (0..d_in * n_c).map(|_| scale * normal.sample(&mut rng)).collect()
}

/// Supernet parameters. Flat row-major layouts:
/// `op_w[((e*K + k)*n_c + out)*n_c + in]`, `op_b[(e*K + k)*n_c + out]`,
/// `alpha[e*K + k]`, `head_w[class*n_c + i]`, `head_b[class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SupernetParams {
    pub space: SearchSpaceConfig,
    pub op_w: Vec<f64>,
    pub op_b: Vec<f64>,
    pub alpha: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
    /// Derived fixed lift; not trained, not checkpointed.
    pub embed: Vec<f64>,
}

impl SupernetParams {
    /// Random initialization: every parameterized op starts as identity plus
    /// noise — affine kernels I + g·N(0,1), per-channel gains 1 + g·N(0,1),
    /// g = 1/sqrt(n_c) — so a softmax-mixed edge opens as a
    /// near-pass-through. Averaging unrelated random branches would contract
    /// activations ~1/sqrt(K) per edge and the logits would vanish over a
    /// deep chain; aligning the branches at identity keeps signal scale
    /// through arbitrary depth. Biases and architecture parameters start at
    /// zero (uniform mix), head rows at N(0,1)/sqrt(n_c).
    pub fn init(space: SearchSpaceConfig, seed: u64) -> Result<Self> {
        space.validate()?;
        let n_c = space.channels;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let gain = 1.0 / (n_c as f64).sqrt();
        let mut op_w: Vec<f64> =
            (0..space.n() * n_c * n_c).map(|_| gain * normal.sample(&mut rng)).collect();
        for slot in 0..space.n() {
            if !matches!(op_kind(slot % space.ops_per_edge), OpKind::Identity) {
                for i in 0..n_c {
                    op_w[(slot * n_c + i) * n_c + i] += 1.0;
                }
            }
        }
        let scale = 1.0 / (n_c as f64).sqrt();
        let head_w =
            (0..space.classes * n_c).map(|_| scale * normal.sample(&mut rng)).collect();
        Ok(SupernetParams {
            space,
            op_w,
            op_b: vec![0.0; space.n() * n_c],
            alpha: vec![0.0; space.n()],
            head_w,
            head_b: vec![0.0; space.classes],
            embed: embed_matrix(space.d_in, n_c),
        })
    }

    pub fn all_finite(&self) -> bool {
        self.op_w.iter().all(|v| v.is_finite())
            && self.op_b.iter().all(|v| v.is_finite())
            && self.alpha.iter().all(|v| v.is_finite())
            && self.head_w.iter().all(|v| v.is_finite())
            && self.head_b.iter().all(|v| v.is_finite())
    }
}

/// Partial derivatives of a scalar loss, same shapes as [`SupernetParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub op_w: Vec<f64>,
    pub op_b: Vec<f64>,
    pub alpha: Vec<f64>,
    pub head_w: Vec<f64>,
    pub head_b: Vec<f64>,
}

impl GradientSet {
    pub fn zeros(space: &SearchSpaceConfig) -> Self {
        let n_c = space.channels;
        GradientSet {
            op_w: vec![0.0; space.n() * n_c * n_c],
            op_b: vec![0.0; space.n() * n_c],
            alpha: vec![0.0; space.n()],
            head_w: vec![0.0; space.classes * n_c],
            head_b: vec![0.0; space.classes],
        }
    }

    fn tensors(&self) -> [&[f64]; 5] {
        [&self.op_w, &self.op_b, &self.alpha, &self.head_w, &self.head_b]
    }

    fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.op_w,
            &mut self.op_b,
            &mut self.alpha,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    /// Global L2 norm over every entry.
    pub fn l2_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .map(|t| t.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, f: f64) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= f;
            }
        }
    }

    /// Keep only the weight-side tensors (op weights/biases and head),
    /// zeroing alpha.
    pub fn weights_only(mut self) -> Self {
        self.alpha.iter_mut().for_each(|v| *v = 0.0);
        self
    }

    /// Keep only alpha, zeroing the weight-side tensors.
    pub fn alpha_only(mut self) -> Self {
        self.op_w.iter_mut().for_each(|v| *v = 0.0);
        self.op_b.iter_mut().for_each(|v| *v = 0.0);
        self.head_w.iter_mut().for_each(|v| *v = 0.0);
        self.head_b.iter_mut().for_each(|v| *v = 0.0);
        self
    }
}

/// Boolean activity masks over every parameter position, derived from a
/// subnet: an op weight row is active iff its op's arch bit is set and the
/// row (output channel) survives the channel mask; alpha follows the arch
/// bits; the head is always fully active.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSupport {
    pub op_w: Vec<bool>,
    pub op_b: Vec<bool>,
    pub alpha: Vec<bool>,
    pub head_w: Vec<bool>,
    pub head_b: Vec<bool>,
}

pub fn param_support(space: &SearchSpaceConfig, subnet: &SubnetSpec) -> ParamSupport {
    let n_c = space.channels;
    let n = space.n();
    let mut op_w = vec![false; n * n_c * n_c];
    let mut op_b = vec![false; n * n_c];
    let mut alpha = vec![false; n];
    for slot in 0..n {
        if !subnet.op_active(slot) {
            continue;
        }
        alpha[slot] = true;
        for out in 0..n_c {
            if !subnet.channel_mask.channel_active(out) {
                continue;
            }
            op_b[slot * n_c + out] = true;
            let base = (slot * n_c + out) * n_c;
            op_w[base..base + n_c].iter_mut().for_each(|v| *v = true);
        }
    }
    ParamSupport {
        op_w,
        op_b,
        alpha,
        head_w: vec![true; space.classes * n_c],
        head_b: vec![true; space.classes],
    }
}

fn check_batch(params: &SupernetParams, subnet: &SubnetSpec, x: &[&[f64]], y: &[usize]) -> Result<()> {
    let space = &params.space;
    if subnet.arch_mask.len() != space.n() {
        return Err(Error::LengthMismatch { left: subnet.arch_mask.len(), right: space.n() });
    }
    if subnet.channel_mask.n_c != space.channels {
        return Err(Error::DimensionMismatch(format!(
            "channel mask width {} vs {} channels",
            subnet.channel_mask.n_c, space.channels
        )));
    }
    if x.len() != y.len() {
        return Err(Error::LengthMismatch { left: x.len(), right: y.len() });
    }
    if x.is_empty() {
        return Err(Error::EmptySplit("batch".into()));
    }
    for (i, row) in x.iter().enumerate() {
        if row.len() != space.d_in {
            return Err(Error::DimensionMismatch(format!(
                "input row {i} has width {}, expected {}",
                row.len(),
                space.d_in
            )));
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("input row {i}")));
        }
    }
    for (i, &label) in y.iter().enumerate() {
        if label >= space.classes {
            return Err(Error::DimensionMismatch(format!(
                "label {label} at sample {i} out of range for {} classes",
                space.classes
            )));
        }
    }
    Ok(())
}

/// Softmax over the active ops of an edge; masked ops get probability 0.
/// Returns `None` when the edge has no active op.
fn edge_probs(params: &SupernetParams, subnet: &SubnetSpec, e: usize) -> Option<Vec<f64>> {
    let k_count = params.space.ops_per_edge;
    let active: Vec<usize> = (0..k_count).filter(|k| subnet.op_active(e * k_count + k)).collect();
    if active.is_empty() {
        return None;
    }
    let mut probs = vec![0.0; k_count];
    let max = active
        .iter()
        .map(|&k| params.alpha[e * k_count + k])
        .fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for &k in &active {
        let v = (params.alpha[e * k_count + k] - max).exp();
        probs[k] = v;
        z += v;
    }
    for &k in &active {
        probs[k] /= z;
    }
    Some(probs)
}

/// Mix probabilities of one edge under a subnet (0 for masked ops, summing
/// to 1 over active ops; all zeros for a fully masked edge).
pub fn mix_probabilities(params: &SupernetParams, subnet: &SubnetSpec, edge: usize) -> Vec<f64> {
    edge_probs(params, subnet, edge).unwrap_or_else(|| vec![0.0; params.space.ops_per_edge])
}

#[derive(Clone, Copy)]
enum OpKind {
    Identity,
    AffineRelu,
    AffineTanh,
    Scale,
}

fn op_kind(k: usize) -> OpKind {
    match k % 4 {
        0 => OpKind::Identity,
        1 => OpKind::AffineRelu,
        2 => OpKind::AffineTanh,
        _ => OpKind::Scale,
    }
}

/// Channel-masked output of one op. Only the leading `active` coordinates
/// are computed; the rest stay zero.
fn apply_op(params: &SupernetParams, slot: usize, h: &[f64], active: usize, out: &mut [f64]) {
    let n_c = params.space.channels;
    out.iter_mut().for_each(|v| *v = 0.0);
    match op_kind(slot % params.space.ops_per_edge) {
        OpKind::Identity => out[..active].copy_from_slice(&h[..active]),
        OpKind::AffineRelu => {
            for i in 0..active {
                let base = (slot * n_c + i) * n_c;
                let mut z = params.op_b[slot * n_c + i];
                for (j, &hj) in h.iter().enumerate() {
                    z += params.op_w[base + j] * hj;
                }
                out[i] = z.max(0.0);
            }
        }
        OpKind::AffineTanh => {
            for i in 0..active {
                let base = (slot * n_c + i) * n_c;
                let mut z = params.op_b[slot * n_c + i];
                for (j, &hj) in h.iter().enumerate() {
                    z += params.op_w[base + j] * hj;
                }
                out[i] = z.tanh();
            }
        }
        // diagonal of the op's weight tensor acts as the per-channel gain
        OpKind::Scale => {
            for i in 0..active {
                out[i] = params.op_w[(slot * n_c + i) * n_c + i] * h[i];
            }
        }
    }
}

fn stable_softmax_xent(logits: &[f64], label: usize) -> (Vec<f64>, f64) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|v| v / z).collect();
    let loss = z.ln() + max - logits[label];
    (probs, loss)
}

fn lift_input(params: &SupernetParams, x: &[f64]) -> Vec<f64> {
    let n_c = params.space.channels;
    let mut h = vec![0.0; n_c];
    for (j, &xj) in x.iter().enumerate() {
        let base = j * n_c;
        for i in 0..n_c {
            h[i] += xj * params.embed[base + i];
        }
    }
    h
}

fn head_logits(params: &SupernetParams, h: &[f64]) -> Vec<f64> {
    let n_c = params.space.channels;
    (0..params.space.classes)
        .map(|c| {
            let base = c * n_c;
            params.head_b[c]
                + h.iter().enumerate().map(|(i, &hi)| params.head_w[base + i] * hi).sum::<f64>()
        })
        .collect()
}

/// Forward pass over a batch: per-sample logits and mean cross-entropy.
pub fn forward(
    params: &SupernetParams,
    subnet: &SubnetSpec,
    x: &[&[f64]],
    y: &[usize],
) -> Result<(Vec<Vec<f64>>, f64)> {
    check_batch(params, subnet, x, y)?;
    let space = &params.space;
    let n_c = space.channels;
    let k_count = space.ops_per_edge;
    let active = subnet.channel_mask.active_count;
    let probs_per_edge: Vec<Option<Vec<f64>>> =
        (0..space.edges).map(|e| edge_probs(params, subnet, e)).collect();

    let mut logits_out = Vec::with_capacity(x.len());
    let mut loss = 0.0;
    let mut op_out = vec![0.0; n_c];
    for (sample, &row) in x.iter().enumerate() {
        let mut h = lift_input(params, row);
        for e in 0..space.edges {
            match &probs_per_edge[e] {
                // fully masked edge: identity through the channel mask
                None => {
                    let mut next = vec![0.0; n_c];
                    next[..active].copy_from_slice(&h[..active]);
                    h = next;
                }
                Some(p) => {
                    let mut next = vec![0.0; n_c];
                    for k in 0..k_count {
                        if p[k] == 0.0 && !subnet.op_active(e * k_count + k) {
                            continue;
                        }
                        apply_op(params, e * k_count + k, &h, active, &mut op_out);
                        for i in 0..active {
                            next[i] += p[k] * op_out[i];
                        }
                    }
                    h = next;
                }
            }
        }
        let logits = head_logits(params, &h);
        let (_, l) = stable_softmax_xent(&logits, y[sample]);
        loss += l;
        logits_out.push(logits);
    }
    Ok((logits_out, loss / x.len() as f64))
}

/// Forward plus exact reverse-mode gradients of the mean batch loss.
/// Masked parameters receive exactly zero gradient.
fn forward_backward(
    params: &SupernetParams,
    subnet: &SubnetSpec,
    x: &[&[f64]],
    y: &[usize],
) -> Result<(f64, GradientSet)> {
    check_batch(params, subnet, x, y)?;
    let space = &params.space;
    let n_c = space.channels;
    let k_count = space.ops_per_edge;
    let active = subnet.channel_mask.active_count;
    let inv_batch = 1.0 / x.len() as f64;
    let probs_per_edge: Vec<Option<Vec<f64>>> =
        (0..space.edges).map(|e| edge_probs(params, subnet, e)).collect();

    let mut grads = GradientSet::zeros(space);
    let mut total_loss = 0.0;

    // per-sample traces
    let mut h_layers: Vec<Vec<f64>> = vec![vec![0.0; n_c]; space.edges + 1];
    let mut op_outs: Vec<Vec<f64>> = vec![vec![0.0; n_c]; space.edges * k_count];

    for (sample, &row) in x.iter().enumerate() {
        h_layers[0] = lift_input(params, row);
        for e in 0..space.edges {
            let mut next = vec![0.0; n_c];
            match &probs_per_edge[e] {
                None => next[..active].copy_from_slice(&h_layers[e][..active]),
                Some(p) => {
                    for k in 0..k_count {
                        let slot = e * k_count + k;
                        if !subnet.op_active(slot) {
                            continue;
                        }
                        let (h_prev, outs) = (&h_layers[e], &mut op_outs[slot]);
                        apply_op(params, slot, h_prev, active, outs);
                        for i in 0..active {
                            next[i] += p[k] * outs[i];
                        }
                    }
                }
            }
            h_layers[e + 1] = next;
        }

        let logits = head_logits(params, &h_layers[space.edges]);
        let (probs, loss) = stable_softmax_xent(&logits, y[sample]);
        total_loss += loss;

        // head backward; d logits scaled by 1/B up front
        let mut dh = vec![0.0; n_c];
        let h_top = &h_layers[space.edges];
        for c in 0..space.classes {
            let dl = (probs[c] - if c == y[sample] { 1.0 } else { 0.0 }) * inv_batch;
            grads.head_b[c] += dl;
            let base = c * n_c;
            for i in 0..n_c {
                grads.head_w[base + i] += dl * h_top[i];
                dh[i] += dl * params.head_w[base + i];
            }
        }

        for e in (0..space.edges).rev() {
            // backward through the channel mask: trailing coordinates of the
            // edge output are forced zeros, so their gradient stops here
            dh[active..].iter_mut().for_each(|v| *v = 0.0);
            let h_prev = &h_layers[e];
            let mut dh_prev = vec![0.0; n_c];
            match &probs_per_edge[e] {
                None => dh_prev[..active].copy_from_slice(&dh[..active]),
                Some(p) => {
                    // inner products of dh with each active op output drive
                    // the softmax gradient
                    let mut s = vec![0.0; k_count];
                    let mut mean_s = 0.0;
                    for k in 0..k_count {
                        let slot = e * k_count + k;
                        if !subnet.op_active(slot) {
                            continue;
                        }
                        s[k] = op_outs[slot][..active]
                            .iter()
                            .zip(&dh[..active])
                            .map(|(o, d)| o * d)
                            .sum();
                        mean_s += p[k] * s[k];
                    }
                    for k in 0..k_count {
                        let slot = e * k_count + k;
                        if !subnet.op_active(slot) {
                            continue;
                        }
                        grads.alpha[slot] += p[k] * (s[k] - mean_s);
                        // gradient into this op's output
                        match op_kind(k) {
                            OpKind::Identity => {
                                for i in 0..active {
                                    dh_prev[i] += p[k] * dh[i];
                                }
                            }
                            OpKind::AffineRelu => {
                                for i in 0..active {
                                    if op_outs[slot][i] <= 0.0 {
                                        continue;
                                    }
                                    let dz = p[k] * dh[i];
                                    grads.op_b[slot * n_c + i] += dz;
                                    let base = (slot * n_c + i) * n_c;
                                    for j in 0..n_c {
                                        grads.op_w[base + j] += dz * h_prev[j];
                                        dh_prev[j] += dz * params.op_w[base + j];
                                    }
                                }
                            }
                            OpKind::AffineTanh => {
                                for i in 0..active {
                                    let t = op_outs[slot][i];
                                    let dz = p[k] * dh[i] * (1.0 - t * t);
                                    grads.op_b[slot * n_c + i] += dz;
                                    let base = (slot * n_c + i) * n_c;
                                    for j in 0..n_c {
                                        grads.op_w[base + j] += dz * h_prev[j];
                                        dh_prev[j] += dz * params.op_w[base + j];
                                    }
                                }
                            }
                            OpKind::Scale => {
                                for i in 0..active {
                                    let d = p[k] * dh[i];
                                    let wi = (slot * n_c + i) * n_c + i;
                                    grads.op_w[wi] += d * h_prev[i];
                                    dh_prev[i] += d * params.op_w[wi];
                                }
                            }
                        }
                    }
                }
            }
            dh = dh_prev;
        }
    }
    Ok((total_loss * inv_batch, grads))
}

/// Exact gradients of the mean batch loss with respect to every active
/// parameter.
pub fn gradients(
    params: &SupernetParams,
    subnet: &SubnetSpec,
    x: &[&[f64]],
    y: &[usize],
) -> Result<GradientSet> {
    forward_backward(params, subnet, x, y).map(|(_, g)| g)
}

/// Scale the whole gradient set to global L2 norm `threshold` when it
/// exceeds it; below-threshold sets pass through bit-identically. The result
/// always satisfies `norm <= threshold`, so clipping is exactly idempotent.
pub fn clip_gradients(mut grads: GradientSet, threshold: f64) -> GradientSet {
    assert!(threshold > 0.0, "clip threshold must be positive");
    loop {
        let norm = grads.l2_norm();
        if !(norm > threshold) {
            return grads;
        }
        let mut f = threshold / norm;
        // guard against a ratio that rounds up to 1.0 and would stall
        if f >= 1.0 {
            f = 1.0 - f64::EPSILON;
        }
        grads.scale(f);
    }
}

/// Adam moment buffers for one parameter group. The buffers span the
/// concatenation of the group's tensors in call order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(len: usize, cfg: &TrainingConfig) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
        }
    }
}

/// One Adam step over a parameter group given as parallel tensor lists.
/// Weight decay enters additively (`g + wd * theta`) before the moment
/// update, and positions whose support flag is false are skipped entirely:
/// neither the parameter nor its moments move.
pub fn adam_step(
    tensors: &mut [&mut [f64]],
    grads: &[&[f64]],
    support: &[&[bool]],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) {
    assert_eq!(tensors.len(), grads.len());
    assert_eq!(tensors.len(), support.len());
    let total: usize = tensors.iter().map(|t| t.len()).sum();
    assert_eq!(total, state.m.len(), "optimizer state sized for a different group");
    state.t += 1;
    let bc1 = 1.0 - state.beta1.powi(state.t as i32);
    let bc2 = 1.0 - state.beta2.powi(state.t as i32);
    let mut off = 0;
    for ((theta, g), sup) in tensors.iter_mut().zip(grads).zip(support) {
        assert_eq!(theta.len(), g.len());
        assert_eq!(theta.len(), sup.len());
        for i in 0..theta.len() {
            if !sup[i] {
                continue;
            }
            let grad = g[i] + weight_decay * theta[i];
            let m = &mut state.m[off + i];
            let v = &mut state.v[off + i];
            *m = state.beta1 * *m + (1.0 - state.beta1) * grad;
            *v = state.beta2 * *v + (1.0 - state.beta2) * grad * grad;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
        off += theta.len();
    }
}

pub(crate) fn gather<'a>(ds: &'a Dataset, idx: &[usize]) -> (Vec<&'a [f64]>, Vec<usize>) {
    (
        idx.iter().map(|&i| ds.features[i].as_slice()).collect(),
        idx.iter().map(|&i| ds.labels[i]).collect(),
    )
}

pub(crate) fn batch_of(idx: &[usize], batch_size: usize, b: usize) -> &[usize] {
    let start = b * batch_size;
    &idx[start..(start + batch_size).min(idx.len())]
}

/// Bilevel local search on one client's data: per paired minibatch, a weight
/// step on the training loss, then an architecture step on the training loss
/// plus `lambda_val` times the validation loss, both clipped and driven by
/// separate Adam states. Batches pair up cyclically over the shorter split.
/// Index lists are reshuffled each epoch by a fixed-seed generator — callers
/// often hand over class-sorted indices, and single-class minibatches
/// oscillate instead of converging — so the whole routine stays a pure
/// function of its arguments. Masked parameters never change. Returns the
/// updated parameters and the mean training loss over the final epoch.
pub fn local_search(
    params: &SupernetParams,
    subnet: &SubnetSpec,
    ds: &Dataset,
    train_idx: &[usize],
    val_idx: &[usize],
    cfg: &TrainingConfig,
) -> Result<(SupernetParams, f64)> {
    cfg.validate()?;
    if train_idx.is_empty() {
        return Err(Error::EmptySplit("local training split".into()));
    }
    if val_idx.is_empty() {
        return Err(Error::EmptySplit("local validation split".into()));
    }
    let space = params.space;
    let support = param_support(&space, subnet);
    let mut p = params.clone();

    let w_len = p.op_w.len() + p.op_b.len() + p.head_w.len() + p.head_b.len();
    let mut w_state = AdamState::new(w_len, cfg);
    let mut a_state = AdamState::new(p.alpha.len(), cfg);

    let nb_t = train_idx.len().div_ceil(cfg.batch_size);
    let nb_v = val_idx.len().div_ceil(cfg.batch_size);
    let steps = nb_t.max(nb_v);

    let mut order_t = train_idx.to_vec();
    let mut order_v = val_idx.to_vec();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(splitmix64(0x5348_5546_464C));

    let mut last_epoch_loss = 0.0;
    for epoch in 0..cfg.local_epochs {
        order_t.shuffle(&mut shuffle_rng);
        order_v.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let (tx, ty) = gather(ds, batch_of(&order_t, cfg.batch_size, step % nb_t));
            let (vx, vy) = gather(ds, batch_of(&order_v, cfg.batch_size, step % nb_v));

            // weight step on the training batch
            let (loss_t, g_tr) = forward_backward(&p, subnet, &tx, &ty)?;
            epoch_loss += loss_t;
            let gw = clip_gradients(g_tr.weights_only(), cfg.clip_threshold);
            adam_step(
                &mut [&mut p.op_w, &mut p.op_b, &mut p.head_w, &mut p.head_b],
                &[&gw.op_w, &gw.op_b, &gw.head_w, &gw.head_b],
                &[&support.op_w, &support.op_b, &support.head_w, &support.head_b],
                &mut w_state,
                cfg.lr_w,
                cfg.weight_decay_w,
            );

            // architecture step at the refreshed weights
            let (_, g_tr2) = forward_backward(&p, subnet, &tx, &ty)?;
            let (_, g_val) = forward_backward(&p, subnet, &vx, &vy)?;
            let mut ga = g_tr2.alpha_only();
            for (a, b) in ga.alpha.iter_mut().zip(&g_val.alpha) {
                *a += cfg.lambda_val * b;
            }
            let ga = clip_gradients(ga, cfg.clip_threshold);
            adam_step(
                &mut [&mut p.alpha],
                &[&ga.alpha],
                &[&support.alpha],
                &mut a_state,
                cfg.lr_alpha,
                cfg.weight_decay_alpha,
            );
        }
        if epoch + 1 == cfg.local_epochs {
            last_epoch_loss = epoch_loss / steps as f64;
        }
    }
    Ok((p, last_epoch_loss))
}

/// Top-1 accuracy over the given sample indices. `subnet = None` evaluates
/// the full supernet (all ops, full channels). Ties break to the lowest
/// class index.
pub fn evaluate(
    params: &SupernetParams,
    subnet: Option<&SubnetSpec>,
    ds: &Dataset,
    idx: &[usize],
) -> Result<f64> {
    if idx.is_empty() {
        return Err(Error::EmptySplit("evaluation set".into()));
    }
    let full;
    let spec = match subnet {
        Some(s) => s,
        None => {
            full = SubnetSpec::full(params.space.n(), params.space.channels);
            &full
        }
    };
    let (x, y) = gather(ds, idx);
    let (logits, _) = forward(params, spec, &x, &y)?;
    let hits = logits
        .iter()
        .zip(&y)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best == label
        })
        .count();
    Ok(hits as f64 / idx.len() as f64)
}

/// Max relative error between analytic gradients and central finite
/// differences over every ACTIVE parameter:
/// `max |analytic - numeric| / max(1e-8, |numeric|)`.
pub fn finite_diff_check(
    params: &SupernetParams,
    subnet: &SubnetSpec,
    x: &[&[f64]],
    y: &[usize],
    eps: f64,
) -> Result<f64> {
    assert!(eps > 0.0, "finite-difference step must be positive");
    let support = param_support(&params.space, subnet);
    let analytic = gradients(params, subnet, x, y)?;
    let mut probe = params.clone();
    let mut worst = 0.0f64;
    // (accessor pairs keep the probing loop uniform across tensors)
    type Field = (
        fn(&mut SupernetParams) -> &mut Vec<f64>,
        fn(&GradientSet) -> &Vec<f64>,
        fn(&ParamSupport) -> &Vec<bool>,
    );
    let fields: [Field; 5] = [
        (|p| &mut p.op_w, |g| &g.op_w, |s| &s.op_w),
        (|p| &mut p.op_b, |g| &g.op_b, |s| &s.op_b),
        (|p| &mut p.alpha, |g| &g.alpha, |s| &s.alpha),
        (|p| &mut p.head_w, |g| &g.head_w, |s| &s.head_w),
        (|p| &mut p.head_b, |g| &g.head_b, |s| &s.head_b),
    ];
    for (get_mut, get_grad, get_sup) in fields {
        for i in 0..get_grad(&analytic).len() {
            if !get_sup(&support)[i] {
                continue;
            }
            let orig = get_mut(&mut probe)[i];
            get_mut(&mut probe)[i] = orig + eps;
            let (_, loss_plus) = forward(&probe, subnet, x, y)?;
            get_mut(&mut probe)[i] = orig - eps;
            let (_, loss_minus) = forward(&probe, subnet, x, y)?;
            get_mut(&mut probe)[i] = orig;
            let numeric = (loss_plus - loss_minus) / (2.0 * eps);
            let err = (get_grad(&analytic)[i] - numeric).abs() / numeric.abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Checkpoint payload: everything needed to rebuild the forward pass.
/// Weights nest as `op_weights[edge][op] = {w: rows, b}`; floats serialize
/// as shortest-round-trip decimals, so reloading reproduces bit-identical
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: SearchSpaceConfig,
    pub op_weights: Vec<Vec<OpTensor>>,
    pub alpha: Vec<Vec<f64>>,
    pub head: HeadTensor,
    pub round: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpTensor {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTensor {
    pub w: Vec<Vec<f64>>,
    pub b: Vec<f64>,
}

impl Checkpoint {
    pub fn from_params(params: &SupernetParams, round: u32) -> Self {
        let space = params.space;
        let n_c = space.channels;
        let op_weights = (0..space.edges)
            .map(|e| {
                (0..space.ops_per_edge)
                    .map(|k| {
                        let slot = e * space.ops_per_edge + k;
                        OpTensor {
                            w: (0..n_c)
                                .map(|out| {
                                    let base = (slot * n_c + out) * n_c;
                                    params.op_w[base..base + n_c].to_vec()
                                })
                                .collect(),
                            b: params.op_b[slot * n_c..(slot + 1) * n_c].to_vec(),
                        }
                    })
                    .collect()
            })
            .collect();
        let alpha = (0..space.edges)
            .map(|e| params.alpha[e * space.ops_per_edge..(e + 1) * space.ops_per_edge].to_vec())
            .collect();
        let head = HeadTensor {
            w: (0..space.classes)
                .map(|c| params.head_w[c * n_c..(c + 1) * n_c].to_vec())
                .collect(),
            b: params.head_b.clone(),
        };
        Checkpoint { config: space, op_weights, alpha, head, round }
    }

    pub fn into_params(self) -> Result<(SupernetParams, u32)> {
        let space = self.config;
        space.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let n_c = space.channels;
        let bad = |what: &str| Error::Checkpoint(format!("{what} shape does not match config"));

        if self.op_weights.len() != space.edges || self.alpha.len() != space.edges {
            return Err(bad("edge list"));
        }
        let mut op_w = Vec::with_capacity(space.n() * n_c * n_c);
        let mut op_b = Vec::with_capacity(space.n() * n_c);
        let mut alpha = Vec::with_capacity(space.n());
        for (edge_ops, edge_alpha) in self.op_weights.iter().zip(&self.alpha) {
            if edge_ops.len() != space.ops_per_edge || edge_alpha.len() != space.ops_per_edge {
                return Err(bad("op list"));
            }
            for op in edge_ops {
                if op.w.len() != n_c || op.w.iter().any(|row| row.len() != n_c) {
                    return Err(bad("op weight"));
                }
                if op.b.len() != n_c {
                    return Err(bad("op bias"));
                }
                for row in &op.w {
                    op_w.extend_from_slice(row);
                }
                op_b.extend_from_slice(&op.b);
            }
            alpha.extend_from_slice(edge_alpha);
        }
        if self.head.w.len() != space.classes
            || self.head.w.iter().any(|row| row.len() != n_c)
            || self.head.b.len() != space.classes
        {
            return Err(bad("head"));
        }
        let mut head_w = Vec::with_capacity(space.classes * n_c);
        for row in &self.head.w {
            head_w.extend_from_slice(row);
        }
        let params = SupernetParams {
            space,
            op_w,
            op_b,
            alpha,
            head_w,
            head_b: self.head.b,
            embed: embed_matrix(space.d_in, n_c),
        };
        if !params.all_finite() {
            return Err(Error::Checkpoint("non-finite parameter value".into()));
        }
        Ok((params, self.round))
    }
}

pub fn save_checkpoint(params: &SupernetParams, round: u32, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(&Checkpoint::from_params(params, round))?;
    std::fs::write(path, json)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(SupernetParams, u32)> {
    let text = std::fs::read_to_string(path)?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    ckpt.into_params()
}
