//! Mask algebra and sparsity arithmetic.
//!
//! A subnet of the supernet is encoded by two masks: an architecture mask
//! (one bit per operation slot, `n = E * K` bits) and a channel mask (how
//! many of the `n_c` hidden channels stay active inside every surviving
//! operation). Composing the two yields the selector applied to the
//! supernet's weights and architecture parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary vector over the supernet's operation slots. Bit = 1 keeps the
/// operation. Carries provenance (round, client) when emitted by a sampler;
/// ad-hoc masks default both to 0.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ArchMask {
    pub bits: Vec<bool>,
    pub round: u32,
    pub client: u32,
}

impl ArchMask {
    pub fn new(bits: Vec<bool>) -> Self {
        ArchMask { bits, round: 0, client: 0 }
    }

    pub fn with_provenance(bits: Vec<bool>, round: u32, client: u32) -> Self {
        ArchMask { bits, round, client }
    }

    pub fn ones(n: usize) -> Self {
        ArchMask::new(vec![true; n])
    }

    pub fn zeros(n: usize) -> Self {
        ArchMask::new(vec![false; n])
    }

    /// Parse from a string of `'0'`/`'1'`, leftmost character = bit 0.
    pub fn from_bit_string(s: &str) -> Result<Self> {
        let bits = s
            .chars()
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Config(format!("invalid mask bit {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        Ok(ArchMask::new(bits))
    }

    /// Render as a string of `'0'`/`'1'`, bit 0 leftmost.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// Channel mask: the leading `active_count` of `n_c` hidden channels stay
/// active in every surviving operation. At least one channel is always kept.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelMask {
    pub active_count: usize,
    pub n_c: usize,
}

impl ChannelMask {
    /// Full-width mask (no channel pruning).
    pub fn full(n_c: usize) -> Self {
        ChannelMask { active_count: n_c, n_c }
    }

    /// Realized channel sparsity, `1 - active_count / n_c`.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.active_count as f64 / self.n_c as f64
    }

    /// Whether hidden coordinate `j` survives the mask.
    pub fn channel_active(&self, j: usize) -> bool {
        j < self.active_count
    }
}

/// Per-client sparsity budget: the target and its split into architecture
/// and channel components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SparsityBudget {
    pub s_target: f64,
    pub s_arch: f64,
    pub s_channel: f64,
}

impl SparsityBudget {
    /// Split a target sparsity against a measured architecture sparsity.
    pub fn for_mask(s_target: f64, mask: &ArchMask) -> Result<Self> {
        let s_arch = arch_sparsity(mask);
        let s_channel = channel_sparsity_for_target(s_target, s_arch)?;
        Ok(SparsityBudget { s_target, s_arch, s_channel })
    }
}

/// Composite subnet selector: architecture mask over operation slots plus a
/// uniform channel mask over the hidden width.
///
/// A weight entry of operation `(e, k)` is active iff the operation's arch
/// bit is 1 and the entry's output channel index is below `active_count`;
/// an architecture parameter is active iff its arch bit is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct SubnetSpec {
    pub arch_mask: ArchMask,
    pub channel_mask: ChannelMask,
}

impl SubnetSpec {
    /// Subnet keeping every operation at full width.
    pub fn full(n: usize, n_c: usize) -> Self {
        SubnetSpec { arch_mask: ArchMask::ones(n), channel_mask: ChannelMask::full(n_c) }
    }

    /// Whether operation slot `slot` (flat index `e * K + k`) is kept.
    pub fn op_active(&self, slot: usize) -> bool {
        self.arch_mask.bits[slot]
    }

    /// Whether the weight row (output channel) `out` of op slot `slot` is kept.
    pub fn weight_active(&self, slot: usize, out: usize) -> bool {
        self.arch_mask.bits[slot] && self.channel_mask.channel_active(out)
    }

    /// Realized fraction of weight entries kept, `(1 - s_arch) * active_count / n_c`.
    pub fn weight_density(&self) -> f64 {
        let keep_ops = 1.0 - arch_sparsity(&self.arch_mask);
        keep_ops * self.channel_mask.active_count as f64 / self.channel_mask.n_c as f64
    }
}

/// Fraction of zero bits in an architecture mask.
pub fn arch_sparsity(mask: &ArchMask) -> f64 {
    let zeros = mask.len() - mask.count_ones();
    zeros as f64 / mask.len() as f64
}

/// Channel sparsity required to reach `s_target` overall given an
/// architecture already pruned to `s_arch`:
/// `1 - min(1, (1 - s_target) / (1 - s_arch))`.
///
/// Returns zero whenever the architecture alone already meets the target.
/// Rejects a fully pruned architecture (`s_arch == 1`).
pub fn channel_sparsity_for_target(s_target: f64, s_arch: f64) -> Result<f64> {
    if s_arch >= 1.0 {
        return Err(Error::DegenerateMask);
    }
    let keep = (1.0 - s_target) / (1.0 - s_arch);
    Ok(1.0 - keep.min(1.0))
}

/// Channel mask realizing `s_channel` over `n_c` channels:
/// the leading `max(1, round((1 - s_channel) * n_c))` channels stay active.
pub fn make_channel_mask(s_channel: f64, n_c: usize) -> ChannelMask {
    let active = ((1.0 - s_channel) * n_c as f64).round() as usize;
    ChannelMask { active_count: active.max(1).min(n_c), n_c }
}

/// Compose an architecture mask with a channel mask into a subnet selector.
pub fn compose_masks(arch_mask: ArchMask, channel_mask: ChannelMask) -> SubnetSpec {
    SubnetSpec { arch_mask, channel_mask }
}

/// Flip every bit. Maps sparsity `s` to `1 - s` exactly; provenance is kept.
pub fn complement(mask: &ArchMask) -> ArchMask {
    ArchMask {
        bits: mask.bits.iter().map(|&b| !b).collect(),
        round: mask.round,
        client: mask.client,
    }
}

/// Hamming distance between two equal-length masks.
pub fn hamming(a: &ArchMask, b: &ArchMask) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch { left: a.len(), right: b.len() });
    }
    Ok(a.bits.iter().zip(&b.bits).filter(|(x, y)| x != y).count())
}

/// Per-edge argmax over architecture parameters; ties break to the lowest
/// operation index. `alpha` is a flat E*K matrix in edge-major order.
pub fn argmax_subnet(alpha: &[f64], edges: usize, ops_per_edge: usize) -> Vec<usize> {
    assert_eq!(alpha.len(), edges * ops_per_edge, "alpha shape mismatch");
    (0..edges)
        .map(|e| {
            let row = &alpha[e * ops_per_edge..(e + 1) * ops_per_edge];
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// One mask-log line: which subnet a client received in a round, with the
/// sparsity bookkeeping that produced it. Serialized as a JSON object with
/// `bits` as a string of `'0'`/`'1'`, bit 0 leftmost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskRecord {
    pub round: u32,
    pub client: u32,
    pub bits: String,
    pub s_arch: f64,
    pub s_channel: f64,
    pub s_target: f64,
}

impl MaskRecord {
    pub fn new(mask: &ArchMask, budget: SparsityBudget) -> Self {
        MaskRecord {
            round: mask.round,
            client: mask.client,
            bits: mask.to_bit_string(),
            s_arch: budget.s_arch,
            s_channel: budget.s_channel,
            s_target: budget.s_target,
        }
    }

    pub fn mask(&self) -> Result<ArchMask> {
        let mut m = ArchMask::from_bit_string(&self.bits)?;
        m.round = self.round;
        m.client = self.client;
        Ok(m)
    }
}

/// Serialize mask records as JSON lines, one record per line, trailing
/// newline included. The byte output is a pure function of the records.
pub fn mask_log_to_jsonl(records: &[MaskRecord]) -> String {
    let mut out = String::new();
    for rec in records {
        out.push_str(&serde_json::to_string(rec).expect("mask records always serialize"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_of(s: &str) -> ArchMask {
        ArchMask::from_bit_string(s).unwrap()
    }

    #[test]
    fn arch_sparsity_counts_zero_bits() {
        assert_eq!(arch_sparsity(&ArchMask::ones(24)), 0.0);
        assert_eq!(arch_sparsity(&ArchMask::zeros(24)), 1.0);
        let half = ArchMask::new((0..24).map(|i| i < 12).collect());
        assert_eq!(arch_sparsity(&half), 0.5);
    }

    #[test]
    fn channel_sparsity_matches_target_arithmetic() {
        assert_eq!(channel_sparsity_for_target(0.5, 0.5).unwrap(), 0.0);
        assert_eq!(channel_sparsity_for_target(0.6, 0.0).unwrap(), 0.6);
        // (1 - 0.75) / (1 - 0.5) = 0.5
        assert!((channel_sparsity_for_target(0.75, 0.5).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn channel_sparsity_rejects_fully_pruned_arch() {
        assert!(matches!(channel_sparsity_for_target(0.5, 1.0), Err(Error::DegenerateMask)));
    }

    #[test]
    fn channel_sparsity_zero_when_arch_exceeds_target() {
        for s_arch in [0.5, 0.6, 0.9] {
            assert_eq!(channel_sparsity_for_target(0.5, s_arch).unwrap(), 0.0);
        }
    }

    #[test]
    fn make_channel_mask_rounds_and_floors() {
        assert_eq!(make_channel_mask(0.5, 16).active_count, 8);
        assert_eq!(make_channel_mask(0.0, 16).active_count, 16);
        // max(1, round(0.4)) = 1
        assert_eq!(make_channel_mask(0.9, 4).active_count, 1);
    }

    #[test]
    fn compose_full_masks_selects_everything() {
        let spec = compose_masks(ArchMask::ones(8), ChannelMask::full(4));
        for slot in 0..8 {
            assert!(spec.op_active(slot));
            for out in 0..4 {
                assert!(spec.weight_active(slot, out));
            }
        }
        assert_eq!(spec.weight_density(), 1.0);
    }

    #[test]
    fn compose_half_channels_selects_leading_half() {
        // 2-edge toy supernet, K = 2, n_c = 4.
        let spec = compose_masks(ArchMask::ones(4), ChannelMask { active_count: 2, n_c: 4 });
        for slot in 0..4 {
            assert!(spec.weight_active(slot, 0));
            assert!(spec.weight_active(slot, 1));
            assert!(!spec.weight_active(slot, 2));
            assert!(!spec.weight_active(slot, 3));
        }
        assert_eq!(spec.weight_density(), 0.5);
    }

    #[test]
    fn compose_half_arch_half_channels_quarter_density() {
        let arch = mask_of("1010");
        let spec = compose_masks(arch, ChannelMask { active_count: 2, n_c: 4 });
        // count active weight rows over the toy supernet by enumeration
        let mut active_rows = 0;
        for slot in 0..4 {
            for out in 0..4 {
                if spec.weight_active(slot, out) {
                    active_rows += 1;
                }
            }
        }
        assert_eq!(active_rows, 4); // 2 ops * 2 rows
        assert!((spec.weight_density() - 0.25).abs() <= 0.25 + 1e-15);
        assert_eq!(spec.weight_density(), active_rows as f64 / 16.0);
    }

    #[test]
    fn composed_density_tracks_target_on_grid() {
        let n_c = 16;
        for i in 0..20 {
            for j in 0..20 {
                let s_target = i as f64 * 0.05;
                let s_arch = j as f64 * 0.05;
                let s_channel = channel_sparsity_for_target(s_target, s_arch).unwrap();
                let cm = make_channel_mask(s_channel, n_c);
                let density = (1.0 - s_arch) * cm.active_count as f64 / n_c as f64;
                assert!(
                    density <= (1.0 - s_target) + 1.0 / n_c as f64 + 1e-12,
                    "density {density} exceeds budget at s_target={s_target} s_arch={s_arch}"
                );
                if s_arch < s_target {
                    assert!(
                        (density - (1.0 - s_target)).abs() <= 1.0 / n_c as f64 + 1e-12,
                        "density {density} off target at s_target={s_target} s_arch={s_arch}"
                    );
                }
            }
        }
    }

    #[test]
    fn complement_flips_sparsity() {
        let m = mask_of("110000000000"); // sparsity 10/12
        let c = complement(&m);
        assert!((arch_sparsity(&m) + arch_sparsity(&c) - 1.0).abs() < 1e-15);
        assert_eq!(complement(&ArchMask::zeros(4)), ArchMask::ones(4));
        // sparsity 0.25 -> 0.75
        let q = mask_of("11101110"); // 2 zeros of 8
        assert_eq!(arch_sparsity(&q), 0.25);
        assert_eq!(arch_sparsity(&complement(&q)), 0.75);
    }

    #[test]
    fn hamming_basics() {
        assert_eq!(hamming(&mask_of("0000"), &mask_of("1111")).unwrap(), 4);
        let m = mask_of("0110");
        assert_eq!(hamming(&m, &m).unwrap(), 0);
        assert_eq!(hamming(&mask_of("1010"), &mask_of("0101")).unwrap(), 4);
        assert!(matches!(
            hamming(&mask_of("10"), &mask_of("101")),
            Err(Error::LengthMismatch { left: 2, right: 3 })
        ));
    }

    #[test]
    fn argmax_picks_max_with_low_index_ties() {
        assert_eq!(argmax_subnet(&[0.1, 0.9, 0.2, 0.3], 1, 4), vec![1]);
        assert_eq!(argmax_subnet(&[0.5, 0.5, 0.5, 0.5], 1, 4), vec![0]);
        // shift invariance per edge
        let a = [0.1, 0.9, 0.2, 0.3, -1.0, 0.0, 2.0, 1.0];
        let shifted: Vec<f64> = a.iter().enumerate().map(|(i, &v)| if i < 4 { v + 5.0 } else { v }).collect();
        assert_eq!(argmax_subnet(&a, 2, 4), argmax_subnet(&shifted, 2, 4));
    }

    #[test]
    fn mask_record_round_trips() {
        let mask = ArchMask::with_provenance(vec![true, false, true, true], 3, 1);
        let budget = SparsityBudget { s_target: 0.5, s_arch: 0.25, s_channel: 1.0 / 3.0 };
        let rec = MaskRecord::new(&mask, budget);
        let json = serde_json::to_string(&rec).unwrap();
        let back: MaskRecord = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.mask().unwrap(), mask);
        assert_eq!(back.bits, "1011");
    }

    proptest! {
        #[test]
        fn complement_is_involution(bits in proptest::collection::vec(any::<bool>(), 1..128)) {
            let m = ArchMask::new(bits);
            prop_assert_eq!(complement(&complement(&m)), m.clone());
            prop_assert!((arch_sparsity(&complement(&m)) - (1.0 - arch_sparsity(&m))).abs() < 1e-15);
        }

        #[test]
        fn hamming_is_a_metric(
            a in proptest::collection::vec(any::<bool>(), 32),
            b in proptest::collection::vec(any::<bool>(), 32),
            c in proptest::collection::vec(any::<bool>(), 32),
        ) {
            let (a, b, c) = (ArchMask::new(a), ArchMask::new(b), ArchMask::new(c));
            let dab = hamming(&a, &b).unwrap();
            let dba = hamming(&b, &a).unwrap();
            let dac = hamming(&a, &c).unwrap();
            let dcb = hamming(&c, &b).unwrap();
            prop_assert_eq!(dab, dba);
            prop_assert_eq!(hamming(&a, &a).unwrap(), 0);
            prop_assert!(dab <= dac + dcb);
        }

        #[test]
        fn compose_never_activates_masked_ops(
            bits in proptest::collection::vec(any::<bool>(), 24),
            active in 1usize..=16,
        ) {
            let spec = compose_masks(ArchMask::new(bits), ChannelMask { active_count: active, n_c: 16 });
            for slot in 0..24 {
                if !spec.arch_mask.bits[slot] {
                    for out in 0..16 {
                        prop_assert!(!spec.weight_active(slot, out));
                    }
                }
            }
        }
    }
}
