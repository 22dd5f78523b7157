//! Progressive bit search over int8 weights.

use serde::{Deserialize, Serialize};

use super::{count_modified, touched, AttackKind, AttackOutcome, AttackReport};
use crate::error::{CfdrError, Result};
use crate::model::{LabeledBatch, Model};
use crate::tensor::Graph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbsConfig {
    /// Stop once held-out accuracy falls below this.
    pub target_acc: f32,
    /// Candidates trial-flipped per layer per iteration.
    pub trial_k: usize,
    pub max_flips: usize,
}

impl Default for PbsConfig {
    fn default() -> Self {
        PbsConfig {
            target_acc: 0.11,
            trial_k: 10,
            max_flips: 50,
        }
    }
}

struct Candidate {
    layer: String,
    index: usize,
    bit: u8,
    loss: f32,
}

/// Gradients of the attack-batch cross-entropy w.r.t. every quantized weight.
fn weight_grads(model: &Model, batch: &LabeledBatch, layers: &[String]) -> Result<(f32, Vec<Vec<f32>>)> {
    let names: Vec<String> = layers.iter().map(|l| format!("{l}.weight")).collect();
    let mut g = Graph::new();
    let bound = model.bind(&mut g, |n| names.iter().any(|w| w == n));
    let x = g.constant(batch.images.clone());
    let h = model.encode_on(&mut g, &bound, x)?;
    let logits = model.classify_on(&mut g, &bound, h)?;
    let ce = g.cross_entropy(logits, &batch.labels)?;
    let loss = g.value(ce).item()?;
    g.backward(ce)?;
    let grads = layers
        .iter()
        .map(|l| {
            let v = bound.var(model.weight_index(l)?);
            g.grad(v)
                .map(<[f32]>::to_vec)
                .ok_or_else(|| CfdrError::MissingGrad(l.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((loss, grads))
}

/// Flips one bit at a time in the quantized layers, each time the flip that
/// most increases attack-batch cross-entropy, until `eval` accuracy drops
/// below `cfg.target_acc` or `cfg.max_flips` is reached.
///
/// Candidates in each layer are ranked by the first-order loss change
/// `grad * delta_w` of the flip, the top `trial_k` are evaluated exactly, and
/// the best across all layers is committed only if it strictly raises the
/// loss.
pub fn pbs_attack(model: &Model, attack_batch: &LabeledBatch, eval: &LabeledBatch, cfg: &PbsConfig) -> Result<AttackOutcome> {
    let layers = model.quantized_layers();
    if layers.is_empty() {
        return Err(CfdrError::Attack("PBS needs at least one quantized layer".into()));
    }
    if attack_batch.is_empty() || eval.is_empty() {
        return Err(CfdrError::InvalidInput("PBS needs non-empty attack and evaluation batches".into()));
    }
    if cfg.trial_k == 0 {
        return Err(CfdrError::InvalidConfig("trial_k must be positive".into()));
    }
    let mut m = model.clone();
    let acc_before = m.accuracy_on(eval)?;
    let mut acc = acc_before;
    let mut trajectory = vec![m.cross_entropy(attack_batch)?];
    let mut flipped_layers: Vec<String> = Vec::new();
    let mut flips = 0;

    while acc >= cfg.target_acc && flips < cfg.max_flips {
        let (loss, grads) = weight_grads(&m, attack_batch, &layers)?;
        let mut best: Option<Candidate> = None;
        for (layer, grad) in layers.iter().zip(&grads) {
            let view = m.quantized_view(layer).expect("layer is quantized");
            let mut ranked: Vec<(f32, usize, u8)> = Vec::with_capacity(grad.len() * 8);
            for (i, &gi) in grad.iter().enumerate() {
                for bit in 0..8u8 {
                    ranked.push((gi * view.flip_delta(i, bit), i, bit));
                }
            }
            let k = cfg.trial_k.min(ranked.len());
            ranked.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            ranked.truncate(k);
            ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
            for &(_, index, bit) in &ranked {
                m.flip_bit(layer, index, bit)?;
                let trial = m.cross_entropy(attack_batch);
                m.flip_bit(layer, index, bit)?;
                let trial = trial?;
                if trial.is_finite() && best.as_ref().map_or(true, |b| trial > b.loss) {
                    best = Some(Candidate {
                        layer: layer.clone(),
                        index,
                        bit,
                        loss: trial,
                    });
                }
            }
        }
        let Some(c) = best.filter(|c| c.loss > loss) else {
            log::info!("PBS: no candidate flip raises the loss after {flips} flips");
            break;
        };
        m.flip_bit(&c.layer, c.index, c.bit)?;
        flips += 1;
        if !flipped_layers.contains(&c.layer) {
            flipped_layers.push(c.layer.clone());
        }
        trajectory.push(c.loss);
        acc = m.accuracy_on(eval)?;
        log::debug!("PBS flip {flips}: {}[{}] bit {} loss {:.4} acc {:.4}", c.layer, c.index, c.bit, c.loss, acc);
    }

    let report = AttackReport {
        attack_kind: AttackKind::Pbs,
        layers_touched: touched(&m, &flipped_layers)?,
        params_modified: count_modified(model, &m),
        bits_flipped: flips,
        acc_before,
        acc_after: acc,
        iterations: flips,
        success: acc < cfg.target_acc,
        objective_trajectory: trajectory,
        constraints: Vec::new(),
    };
    Ok(AttackOutcome { model: m, report })
}
