//! Gradient-driven tampering toward one class, restrained by an l2 penalty.

use serde::{Deserialize, Serialize};

use super::{count_modified, touched, AttackKind, AttackOutcome, AttackReport};
use crate::error::{CfdrError, Result};
use crate::model::{LabeledBatch, Model};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdaConfig {
    pub target_class: usize,
    pub lr: f32,
    pub l2_coef: f32,
    pub max_iters: usize,
    pub layer: String,
}

impl Default for GdaConfig {
    fn default() -> Self {
        GdaConfig {
            target_class: 0,
            lr: 1e-2,
            l2_coef: 1e-3,
            max_iters: 500,
            layer: "encoder.conv2".into(),
        }
    }
}

fn mean_target_logit(logits: &Tensor, target: usize) -> f32 {
    let c = logits.shape()[1];
    let rows = logits.shape()[0];
    (0..rows).map(|i| logits.data()[i * c + target]).sum::<f32>() / rows as f32
}

/// Cross-entropy toward `target` and its gradient w.r.t. the layer weight.
fn target_grad(m: &Model, images: &Tensor, layer: &str, target: usize) -> Result<Vec<f32>> {
    let wname = format!("{layer}.weight");
    let wi = m.weight_index(layer)?;
    let mut g = Graph::new();
    let bound = m.bind(&mut g, |n| n == wname);
    let x = g.constant(images.clone());
    let h = m.encode_on(&mut g, &bound, x)?;
    let logits = m.classify_on(&mut g, &bound, h)?;
    let labels = vec![target; images.shape()[0]];
    let ce = g.cross_entropy(logits, &labels)?;
    g.backward(ce)?;
    g.grad(bound.var(wi))
        .map(<[f32]>::to_vec)
        .ok_or_else(|| CfdrError::MissingGrad(wname))
}

/// Proximal gradient descent on `CE(target) + l2_coef * |d|^2` over the
/// modification `d` of `cfg.layer`. A step is kept only if it raises the
/// mean target-class logit on `sources`; otherwise the step size halves.
pub fn gda_attack(model: &Model, sources: &Tensor, eval: &LabeledBatch, cfg: &GdaConfig) -> Result<AttackOutcome> {
    if cfg.target_class >= model.num_classes() {
        return Err(CfdrError::OutOfRange {
            what: "target class",
            value: cfg.target_class,
            limit: model.num_classes(),
        });
    }
    if !(cfg.lr > 0.0) || !(cfg.l2_coef >= 0.0) {
        return Err(CfdrError::InvalidConfig("GDA needs lr > 0 and l2_coef >= 0".into()));
    }
    let wi = model.weight_index(&cfg.layer)?;
    let mut m = model.clone();
    m.drop_view(&cfg.layer);
    let w0 = model.params()[wi].tensor.data().to_vec();
    let mut d = vec![0.0f32; w0.len()];
    let mut lr = cfg.lr;
    let mut current = mean_target_logit(&m.logits(sources)?, cfg.target_class);
    let mut trajectory = vec![current];
    let mut iterations = 0;
    let mut success = false;

    for _ in 0..cfg.max_iters {
        if m.predict(sources)?.iter().all(|&p| p == cfg.target_class) {
            success = true;
            break;
        }
        iterations += 1;
        let grad = target_grad(&m, sources, &cfg.layer, cfg.target_class)?;
        let shrink = 1.0 + 2.0 * lr * cfg.l2_coef;
        let proposal: Vec<f32> = d.iter().zip(&grad).map(|(di, gi)| (di - lr * gi) / shrink).collect();
        let mut trial = m.clone();
        for ((w, &base), &dv) in trial.params_mut()[wi].tensor.data_mut().iter_mut().zip(&w0).zip(&proposal) {
            *w = base + dv;
        }
        let value = mean_target_logit(&trial.logits(sources)?, cfg.target_class);
        if value.is_finite() && value > current {
            m = trial;
            d = proposal;
            current = value;
            trajectory.push(value);
        } else {
            lr *= 0.5;
        }
    }
    if !success {
        success = m.predict(sources)?.iter().all(|&p| p == cfg.target_class);
    }

    let report = AttackReport {
        attack_kind: AttackKind::Gda,
        layers_touched: touched(model, std::slice::from_ref(&cfg.layer))?,
        params_modified: count_modified(model, &m),
        bits_flipped: 0,
        acc_before: model.accuracy_on(eval)?,
        acc_after: m.accuracy_on(eval)?,
        iterations,
        success,
        objective_trajectory: trajectory,
        constraints: Vec::new(),
    };
    Ok(AttackOutcome { model: m, report })
}
