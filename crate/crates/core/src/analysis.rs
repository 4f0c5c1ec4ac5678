//! Sampling diagnostics and communication accounting.
//!
//! Everything here is a pure function over mask logs or round summaries:
//! Hamming statistics that show how a strategy explores the search space
//! over rounds, per-bit overlap counts across clients, and the average
//! number of parameters a round actually communicates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::micromodel::SearchSpaceConfig;
use crate::searchspace::{hamming, ArchMask, SubnetSpec};

/// One round's summary, as written to the metrics CSV (the overlap vector is
/// kept separately; it has its own wide format).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: u32,
    pub supernet_test_acc: f64,
    pub argmax_test_acc: f64,
    pub mean_client_train_loss: f64,
    pub min_hamming_to_history: usize,
    pub mean_pairwise_hamming: f64,
    /// Per-bit count of clients whose mask keeps that operation, in [0, C].
    pub overlap: Vec<usize>,
    pub avg_comm_params: f64,
    pub wall_ms: u64,
}

/// Minimum Hamming distance from `sample` to any prior mask. An empty
/// history scores the maximal distance `n` so round-1 points stay on the
/// same scale as later rounds.
pub fn min_distance_to_history(sample: &ArchMask, history: &[ArchMask]) -> Result<usize> {
    let mut best = sample.len();
    for h in history {
        best = best.min(hamming(sample, h)?);
    }
    Ok(best)
}

/// Mean Hamming distance over all unordered pairs of the round's masks.
pub fn mean_pairwise_distance(masks: &[ArchMask]) -> Result<f64> {
    if masks.len() < 2 {
        return Err(Error::NotEnoughSamples { needed: 2, got: masks.len() });
    }
    let mut total = 0usize;
    let mut pairs = 0usize;
    for a in 0..masks.len() {
        for b in (a + 1)..masks.len() {
            total += hamming(&masks[a], &masks[b])?;
            pairs += 1;
        }
    }
    Ok(total as f64 / pairs as f64)
}

/// Per-bit count of masks keeping that operation.
pub fn overlap_vector(masks: &[ArchMask]) -> Result<Vec<usize>> {
    let first = masks.first().ok_or(Error::NotEnoughSamples { needed: 1, got: 0 })?;
    let n = first.len();
    let mut counts = vec![0usize; n];
    for m in masks {
        if m.len() != n {
            return Err(Error::LengthMismatch { left: n, right: m.len() });
        }
        for (c, &bit) in counts.iter_mut().zip(&m.bits) {
            if bit {
                *c += 1;
            }
        }
    }
    Ok(counts)
}

/// Parameters the head always contributes, independent of any mask.
pub fn head_param_count(space: &SearchSpaceConfig) -> usize {
    space.channels * space.classes + space.classes
}

/// Active parameter count of one subnet: every active op contributes its
/// surviving weight rows plus biases plus one architecture parameter, and
/// the head always ships in full.
pub fn subnet_param_count(subnet: &SubnetSpec, space: &SearchSpaceConfig) -> usize {
    let ops = subnet.arch_mask.count_ones();
    let rows = subnet.channel_mask.active_count;
    ops * rows * (space.channels + 1) + ops + head_param_count(space)
}

/// Mean active parameter count over a round's subnets; 0 for no clients.
pub fn comm_cost(subnets: &[SubnetSpec], space: &SearchSpaceConfig) -> f64 {
    if subnets.is_empty() {
        return 0.0;
    }
    let total: usize = subnets.iter().map(|s| subnet_param_count(s, space)).sum();
    total as f64 / subnets.len() as f64
}

pub const METRICS_CSV_HEADER: &str = "round,supernet_test_acc,argmax_test_acc,mean_client_train_loss,min_hamming_to_history,mean_pairwise_hamming,avg_comm_params,wall_ms";

/// Render round summaries as CSV, header included, one row per round.
/// Floats print in shortest round-trip form, so output is byte-stable for
/// identical inputs.
pub fn metrics_to_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_CSV_HEADER);
    out.push('\n');
    for m in metrics {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            m.round,
            m.supernet_test_acc,
            m.argmax_test_acc,
            m.mean_client_train_loss,
            m.min_hamming_to_history,
            m.mean_pairwise_hamming,
            m.avg_comm_params,
            m.wall_ms
        ));
    }
    out
}

/// Per-round diagnostics recomputed from a replayed mask log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogDiagnostics {
    pub rounds: Vec<u32>,
    pub min_hamming_to_history: Vec<usize>,
    pub mean_pairwise_hamming: Vec<f64>,
    pub overlap: Vec<Vec<usize>>,
}

/// Recompute the Hamming diagnostics from replayed (round, client, mask)
/// entries, grouped by round in order. Single-mask rounds report pairwise
/// distance 0.
pub fn diagnose_log(entries: &[(u32, u32, ArchMask)]) -> Result<LogDiagnostics> {
    let mut diag = LogDiagnostics {
        rounds: Vec::new(),
        min_hamming_to_history: Vec::new(),
        mean_pairwise_hamming: Vec::new(),
        overlap: Vec::new(),
    };
    let mut history: Vec<ArchMask> = Vec::new();
    let mut at = 0;
    while at < entries.len() {
        let round = entries[at].0;
        let mut masks: Vec<ArchMask> = Vec::new();
        while at < entries.len() && entries[at].0 == round {
            masks.push(entries[at].2.clone());
            at += 1;
        }
        let mut min_hist = masks[0].len();
        for m in &masks {
            min_hist = min_hist.min(min_distance_to_history(m, &history)?);
        }
        let pairwise =
            if masks.len() < 2 { 0.0 } else { mean_pairwise_distance(&masks)? };
        diag.rounds.push(round);
        diag.min_hamming_to_history.push(min_hist);
        diag.mean_pairwise_hamming.push(pairwise);
        diag.overlap.push(overlap_vector(&masks)?);
        history.extend(masks);
    }
    Ok(diag)
}

/// CSV of the scalar diagnostics, one row per round.
pub fn diagnostics_to_csv(diag: &LogDiagnostics) -> String {
    let mut out = String::from("round,min_hamming_to_history,mean_pairwise_hamming\n");
    for i in 0..diag.rounds.len() {
        out.push_str(&format!(
            "{},{},{}\n",
            diag.rounds[i], diag.min_hamming_to_history[i], diag.mean_pairwise_hamming[i]
        ));
    }
    out
}

/// CSV of the overlap counts: one row per round, one column per bit.
pub fn overlap_to_csv(diag: &LogDiagnostics) -> String {
    let width = diag.overlap.first().map_or(0, Vec::len);
    let mut out = String::from("round");
    for b in 0..width {
        out.push_str(&format!(",bit{b}"));
    }
    out.push('\n');
    for i in 0..diag.rounds.len() {
        out.push_str(&diag.rounds[i].to_string());
        for v in &diag.overlap[i] {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}
