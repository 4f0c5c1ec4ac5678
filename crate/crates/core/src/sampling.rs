//! Per-round, per-client architecture mask generation.
//!
//! The flagship strategy walks the bit-flip hypercube: in round `r` each
//! client receives the round's root with every `r`-th bit flipped, starting
//! at offset `c mod r`. Early rounds therefore land far apart (round 1 jumps
//! to the diametrically opposite corner) and later rounds refine locally as
//! flip sets shrink. A spectrum of baselines (independent random, antithetic
//! pairs, one common mask, half/half complements, Hadamard codewords, and a
//! no-sampling full-supernet control) shares the same emission interface.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::searchspace::{ArchMask, MaskRecord};

/// Mask-generation strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Hypercube walk: flip every r-th bit of the round's root, root drawn
    /// from the previous round's distinct masks.
    Diversified,
    /// Same flip rule with a fresh random root every round.
    DiversifiedReset,
    /// Fresh random root on rounds 1, 11, 21, ...; otherwise like Diversified.
    DiversifiedReset10,
    /// Independent Bernoulli(0.5) mask per client.
    Random,
    /// Clients 0,2,4,... random; each odd client gets the previous client's
    /// complement.
    Antithetic,
    /// One random mask shared by every client.
    Common,
    /// One random mask for the first half of the clients, its complement for
    /// the rest.
    Complement,
    /// Rows of a Sylvester Hadamard codebook, assigned cyclically.
    Hadamard,
    /// All-ones masks: every client trains the full supernet.
    NoSampling,
}

impl Strategy {
    pub const ALL: [Strategy; 9] = [
        Strategy::Diversified,
        Strategy::DiversifiedReset,
        Strategy::DiversifiedReset10,
        Strategy::Random,
        Strategy::Antithetic,
        Strategy::Common,
        Strategy::Complement,
        Strategy::Hadamard,
        Strategy::NoSampling,
    ];

    pub fn is_diversified(self) -> bool {
        matches!(
            self,
            Strategy::Diversified | Strategy::DiversifiedReset | Strategy::DiversifiedReset10
        )
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Strategy::Diversified => "diversified",
            Strategy::DiversifiedReset => "diversified_reset",
            Strategy::DiversifiedReset10 => "diversified_reset10",
            Strategy::Random => "random",
            Strategy::Antithetic => "antithetic",
            Strategy::Common => "common",
            Strategy::Complement => "complement",
            Strategy::Hadamard => "hadamard",
            Strategy::NoSampling => "nosampling",
        };
        f.write_str(name)
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Ok(match norm.as_str() {
            "diversified" => Strategy::Diversified,
            "diversified_reset" => Strategy::DiversifiedReset,
            "diversified_reset10" => Strategy::DiversifiedReset10,
            "random" => Strategy::Random,
            "antithetic" => Strategy::Antithetic,
            "common" => Strategy::Common,
            "complement" => Strategy::Complement,
            "hadamard" => Strategy::Hadamard,
            "nosampling" | "no_sampling" => Strategy::NoSampling,
            _ => return Err(Error::Config(format!("unknown strategy {s:?}"))),
        })
    }
}

/// Mutable generator state. A single owner advances it round by round;
/// emitted masks are immutable snapshots.
#[derive(Debug, Clone)]
pub struct SamplerState {
    pub strategy: Strategy,
    /// Mask length (operation-slot count of the search space).
    pub n: usize,
    /// Number of clients served per round.
    pub clients: usize,
    /// 1-based round counter; doubles as the flip period of the hypercube walk.
    pub round: u32,
    /// Distinct masks of the previous round (hypercube variants only).
    pub parent_nodes: Vec<ArchMask>,
    pub rng: ChaCha8Rng,
    /// Every mask emitted so far, in (round, client) order.
    pub history: Vec<ArchMask>,
    last_root: Option<Vec<bool>>,
}

impl SamplerState {
    /// Root bits used by the most recent emission (hypercube variants only).
    pub fn last_root(&self) -> Option<&[bool]> {
        self.last_root.as_deref()
    }
}

fn random_bits<R: Rng>(rng: &mut R, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.5)).collect()
}

/// Create a sampler. For hypercube variants the initial parent set holds one
/// uniform-random mask (each bit Bernoulli(0.5)); identical
/// `(strategy, n, clients, seed)` yields an identical state.
pub fn init_sampler(strategy: Strategy, n: usize, clients: usize, seed: u64) -> SamplerState {
    assert!(n >= 1, "mask length must be at least 1");
    assert!(clients >= 1, "client count must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let parent_nodes = if strategy.is_diversified() {
        vec![ArchMask::new(random_bits(&mut rng, n))]
    } else {
        Vec::new()
    };
    SamplerState {
        strategy,
        n,
        clients,
        round: 1,
        parent_nodes,
        rng,
        history: Vec::new(),
        last_root: None,
    }
}

/// Emit this round's masks (one per client, in client order) and advance the
/// state by exactly one round.
pub fn next_round_masks(state: &mut SamplerState) -> Vec<ArchMask> {
    let round = state.round;
    let n = state.n;
    let clients = state.clients;
    let masks: Vec<ArchMask> = match state.strategy {
        Strategy::Diversified | Strategy::DiversifiedReset | Strategy::DiversifiedReset10 => {
            let fresh_root = match state.strategy {
                Strategy::DiversifiedReset => true,
                Strategy::DiversifiedReset10 => (round - 1) % 10 == 0,
                _ => false,
            };
            let root: Vec<bool> = if fresh_root {
                random_bits(&mut state.rng, n)
            } else {
                let idx = state.rng.random_range(0..state.parent_nodes.len());
                state.parent_nodes[idx].bits.clone()
            };
            let period = round as usize;
            let out: Vec<ArchMask> = (0..clients)
                .map(|c| {
                    let offset = c % period;
                    let bits = root
                        .iter()
                        .enumerate()
                        .map(|(p, &b)| if p % period == offset { !b } else { b })
                        .collect();
                    ArchMask::with_provenance(bits, round, c as u32)
                })
                .collect();
            let mut distinct: Vec<ArchMask> = Vec::new();
            for m in &out {
                if !distinct.iter().any(|d| d.bits == m.bits) {
                    distinct.push(m.clone());
                }
            }
            state.parent_nodes = distinct;
            state.last_root = Some(root);
            out
        }
        Strategy::Random => (0..clients)
            .map(|c| ArchMask::with_provenance(random_bits(&mut state.rng, n), round, c as u32))
            .collect(),
        Strategy::Antithetic => {
            let mut out: Vec<ArchMask> = Vec::with_capacity(clients);
            for c in 0..clients {
                let bits: Vec<bool> = if c % 2 == 0 {
                    random_bits(&mut state.rng, n)
                } else {
                    out[c - 1].bits.iter().map(|&b| !b).collect()
                };
                out.push(ArchMask::with_provenance(bits, round, c as u32));
            }
            out
        }
        Strategy::Common => {
            let bits = random_bits(&mut state.rng, n);
            (0..clients)
                .map(|c| ArchMask::with_provenance(bits.clone(), round, c as u32))
                .collect()
        }
        Strategy::Complement => {
            let bits = random_bits(&mut state.rng, n);
            let flipped: Vec<bool> = bits.iter().map(|&b| !b).collect();
            let first_half = clients.div_ceil(2);
            (0..clients)
                .map(|c| {
                    let chosen = if c < first_half { bits.clone() } else { flipped.clone() };
                    ArchMask::with_provenance(chosen, round, c as u32)
                })
                .collect()
        }
        Strategy::Hadamard => {
            let book = hadamard_codebook(n);
            (0..clients)
                .map(|c| {
                    ArchMask::with_provenance(book[c % book.len()].bits.clone(), round, c as u32)
                })
                .collect()
        }
        Strategy::NoSampling => (0..clients)
            .map(|c| ArchMask::with_provenance(vec![true; n], round, c as u32))
            .collect(),
    };
    state.history.extend(masks.iter().cloned());
    state.round += 1;
    masks
}

/// Binary codebook from the Sylvester Hadamard matrix of order
/// `m = next_power_of_two(n)`: entry (i, j) is 1 iff popcount(i AND j) is
/// even, each row truncated to `n` bits. All `m` rows are returned; the first
/// is all-ones, and for `m == n` any two distinct rows differ in exactly
/// `n / 2` positions.
pub fn hadamard_codebook(n: usize) -> Vec<ArchMask> {
    assert!(n >= 1, "codebook needs n >= 1");
    let m = n.next_power_of_two();
    (0..m)
        .map(|i| ArchMask::new((0..n).map(|j| (i & j).count_ones() % 2 == 0).collect()))
        .collect()
}

/// Rebuild the mask sequence from mask-log text (one JSON record per line,
/// blank lines ignored), sorted by (round, client). Malformed records report
/// their 1-based line number.
pub fn sampler_replay(log: &str) -> Result<Vec<(u32, u32, ArchMask)>> {
    let mut out = Vec::new();
    for (idx, line) in log.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: MaskRecord = serde_json::from_str(line)
            .map_err(|e| Error::MaskLogParse { line: idx + 1, msg: e.to_string() })?;
        let mask = rec
            .mask()
            .map_err(|e| Error::MaskLogParse { line: idx + 1, msg: e.to_string() })?;
        out.push((rec.round, rec.client, mask));
    }
    out.sort_by_key(|&(r, c, _)| (r, c));
    Ok(out)
}
