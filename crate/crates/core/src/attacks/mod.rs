//! Simulated fault-injection attacks on model parameters.
//!
//! Every attack takes the victim by shared reference and returns a tampered
//! copy, so the pre-attack model stays available for diffing.

mod fsa;
mod gda;
mod pbs;
mod random;

pub use fsa::{fsa_attack, ConstraintKind, ConstraintOutcome, FsaConfig, FsaNorm};
pub use gda::{gda_attack, GdaConfig};
pub use pbs::{pbs_attack, PbsConfig};
pub use random::{chosen_bits, random_bit_flip, BitPolicy};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::Model;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Pbs,
    FsaL0,
    FsaL2,
    Gda,
    RandomBitFlip,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::Pbs => "pbs",
            AttackKind::FsaL0 => "fsa_l0",
            AttackKind::FsaL2 => "fsa_l2",
            AttackKind::Gda => "gda",
            AttackKind::RandomBitFlip => "random_bit_flip",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerTouched {
    pub layer_name: String,
    pub total_param_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub attack_kind: AttackKind,
    pub layers_touched: Vec<LayerTouched>,
    pub params_modified: usize,
    pub bits_flipped: usize,
    pub acc_before: f32,
    pub acc_after: f32,
    pub iterations: usize,
    /// Whether the attack reached its goal before hitting its iteration cap.
    pub success: bool,
    /// Attack objective after each accepted iteration (index 0 is the start).
    pub objective_trajectory: Vec<f32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub constraints: Vec<ConstraintOutcome>,
}

impl AttackReport {
    pub fn total_params(&self) -> usize {
        self.layers_touched.iter().map(|l| l.total_param_count).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Clone, Debug)]
pub struct AttackOutcome {
    pub model: Model,
    pub report: AttackReport,
}

pub(crate) fn touched(model: &Model, layers: &[String]) -> Result<Vec<LayerTouched>> {
    layers
        .iter()
        .map(|l| {
            let info = model.layer(l)?;
            Ok(LayerTouched {
                layer_name: info.name,
                total_param_count: info.total_params,
            })
        })
        .collect()
}

/// Number of weight entries (across all parameters) that differ bitwise.
pub fn count_modified(before: &Model, after: &Model) -> usize {
    before
        .params()
        .iter()
        .zip(after.params())
        .map(|(a, b)| {
            a.tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .filter(|(x, y)| x.to_bits() != y.to_bits())
                .count()
        })
        .sum()
}

/// Names of parameters whose bytes differ between two models.
pub fn changed_params(before: &Model, after: &Model) -> Vec<String> {
    before
        .params()
        .iter()
        .zip(after.params())
        .filter(|(a, b)| {
            a.tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .any(|(x, y)| x.to_bits() != y.to_bits())
        })
        .map(|(a, _)| a.name.clone())
        .collect()
}
