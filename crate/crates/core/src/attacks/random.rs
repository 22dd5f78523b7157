//! Seeded random bit flips, the baseline fault model.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{count_modified, touched, AttackKind, AttackOutcome, AttackReport};
use crate::error::{CfdrError, Result};
use crate::model::{LabeledBatch, Model};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitPolicy {
    /// Any (index, bit) pair.
    Uniform,
    /// Only the sign bit (bit 7).
    Msb,
}

/// The `n_bits` (index, bit) pairs chosen for a seed. Sets for smaller
/// `n_bits` are prefixes of sets for larger ones.
pub fn chosen_bits(len: usize, n_bits: usize, policy: BitPolicy, seed: u64) -> Result<Vec<(usize, u8)>> {
    let mut pool: Vec<(usize, u8)> = match policy {
        BitPolicy::Uniform => (0..len).flat_map(|i| (0..8u8).map(move |b| (i, b))).collect(),
        BitPolicy::Msb => (0..len).map(|i| (i, 7)).collect(),
    };
    if n_bits > pool.len() {
        return Err(CfdrError::OutOfRange {
            what: "n_bits",
            value: n_bits,
            limit: pool.len(),
        });
    }
    pool.shuffle(&mut rng::substream(seed, "attack-random", 0));
    pool.truncate(n_bits);
    Ok(pool)
}

/// Flips `n_bits` distinct bits of an already quantized layer.
pub fn random_bit_flip(
    model: &Model,
    layer: &str,
    n_bits: usize,
    policy: BitPolicy,
    seed: u64,
    eval: &LabeledBatch,
) -> Result<AttackOutcome> {
    let view = model
        .quantized_view(layer)
        .ok_or_else(|| CfdrError::NotQuantized(layer.to_string()))?;
    let bits = chosen_bits(view.len(), n_bits, policy, seed)?;
    let mut m = model.clone();
    for &(i, b) in &bits {
        m.flip_bit(layer, i, b)?;
    }
    let report = AttackReport {
        attack_kind: AttackKind::RandomBitFlip,
        layers_touched: touched(model, &[layer.to_string()])?,
        params_modified: count_modified(model, &m),
        bits_flipped: n_bits,
        acc_before: model.accuracy_on(eval)?,
        acc_after: m.accuracy_on(eval)?,
        iterations: 1,
        success: true,
        objective_trajectory: Vec::new(),
        constraints: Vec::new(),
    };
    Ok(AttackOutcome { model: m, report })
}
