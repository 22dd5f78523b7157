//! Constrained parameter modification solved by ADMM splitting.
//!
//! The modification `d` of one layer's weights is split into `delta` (fitted
//! to the classification constraints) and `z` (carrying the norm penalty),
//! tied by `delta = z` with scaled dual `u`:
//!
//! ```text
//! delta <- argmin hinge(W0 + delta) + rho/2 |delta - z + u|^2   (gradient steps)
//! z     <- prox_penalty(delta + u)
//! u     <- u + delta - z
//! ```
//!
//! `W0 + z` is the candidate installed after every iteration.

use serde::{Deserialize, Serialize};

use super::{count_modified, touched, AttackKind, AttackOutcome, AttackReport};
use crate::error::{CfdrError, Result};
use crate::model::{LabeledBatch, Model};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsaNorm {
    L0,
    L2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsaConfig {
    /// Images (the first `s` of the constrained set) forced to their targets.
    pub s: usize,
    /// Size of the constrained set.
    pub r: usize,
    pub target_labels: Vec<usize>,
    pub norm: FsaNorm,
    /// Weight of the squared-norm penalty (used by `l2`).
    pub penalty: f32,
    pub max_iters: usize,
    pub layer: String,
    pub admm_rho: f32,
    /// Fraction of the layer's weights the `l0` projection keeps.
    pub keep_fraction: f32,
    /// Logit margin required by the hinge constraints.
    pub margin: f32,
    pub inner_steps: usize,
    pub lr: f32,
}

impl Default for FsaConfig {
    fn default() -> Self {
        FsaConfig {
            s: 5,
            r: 20,
            target_labels: Vec::new(),
            norm: FsaNorm::L2,
            penalty: 1e-3,
            max_iters: 300,
            layer: "classifier".into(),
            admm_rho: 1.0,
            keep_fraction: 0.1,
            margin: 0.5,
            inner_steps: 5,
            lr: 0.05,
        }
    }
}

impl FsaConfig {
    pub fn validate(&self, constrained: &LabeledBatch) -> Result<()> {
        if self.s > self.r {
            return Err(CfdrError::InvalidConfig(format!("S={} exceeds R={}", self.s, self.r)));
        }
        if constrained.len() != self.r {
            return Err(CfdrError::InvalidConfig(format!(
                "constrained set has {} images but R={}",
                constrained.len(),
                self.r
            )));
        }
        if self.target_labels.len() != self.s {
            return Err(CfdrError::InvalidConfig(format!(
                "{} target labels given for S={}",
                self.target_labels.len(),
                self.s
            )));
        }
        for (i, (&t, &y)) in self.target_labels.iter().zip(&constrained.labels).enumerate() {
            if t == y {
                return Err(CfdrError::InvalidConfig(format!("target {t} of image {i} equals its true label")));
            }
        }
        let positive = [("penalty", self.penalty), ("admm_rho", self.admm_rho), ("lr", self.lr)];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(CfdrError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(CfdrError::InvalidConfig("keep_fraction must lie in (0, 1]".into()));
        }
        if self.inner_steps == 0 {
            return Err(CfdrError::InvalidConfig("inner_steps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintKind {
    /// Must be classified as `wanted`.
    Target,
    /// Must keep its pre-attack prediction `wanted`.
    Keep,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintOutcome {
    pub image: usize,
    pub kind: ConstraintKind,
    pub wanted: usize,
    pub predicted: usize,
    pub satisfied: bool,
}

/// Logits of the constrained set as a function of the layer weight. For the
/// classifier the encoder output is fixed, so embeddings are computed once.
struct Objective<'a> {
    images: &'a Tensor,
    embeddings: Option<Tensor>,
    layer: String,
}

impl Objective<'_> {
    fn logits(&self, m: &Model) -> Result<Tensor> {
        match &self.embeddings {
            Some(h) => m.classify(h),
            None => m.logits(self.images),
        }
    }

    /// Hinge loss and its gradient w.r.t. the layer weight.
    fn hinge_grad(&self, m: &Model, wanted: &[usize], margin: f32) -> Result<(f32, Vec<f32>)> {
        let wname = format!("{}.weight", self.layer);
        let wi = m.weight_index(&self.layer)?;
        let mut g = Graph::new();
        let bound = m.bind(&mut g, |n| n == wname);
        let h = match &self.embeddings {
            Some(h) => g.constant(h.clone()),
            None => {
                let x = g.constant(self.images.clone());
                m.encode_on(&mut g, &bound, x)?
            }
        };
        let logits = m.classify_on(&mut g, &bound, h)?;
        let (loss, coef) = hinge_coefficients(g.value(logits), wanted, margin);
        let c = g.constant(coef);
        let prod = g.mul(logits, c)?;
        let s = g.sum(prod)?;
        g.backward(s)?;
        let grad = g
            .grad(bound.var(wi))
            .ok_or_else(|| CfdrError::MissingGrad(wname.clone()))?
            .to_vec();
        Ok((loss, grad))
    }
}

/// `sum_i max(0, max_{j != y_i} z_ij - z_iy + margin)` and the matrix `C` with
/// `d loss / d logits = C`.
fn hinge_coefficients(logits: &Tensor, wanted: &[usize], margin: f32) -> (f32, Tensor) {
    let c = logits.shape()[1];
    let mut coef = vec![0.0f32; logits.numel()];
    let mut loss = 0.0f32;
    for (i, &y) in wanted.iter().enumerate() {
        let row = &logits.data()[i * c..(i + 1) * c];
        let (j, zj) = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != y)
            .fold((usize::MAX, f32::NEG_INFINITY), |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc });
        let h = zj - row[y] + margin;
        if h > 0.0 {
            loss += h;
            coef[i * c + j] += 1.0;
            coef[i * c + y] -= 1.0;
        }
    }
    (loss, Tensor::new(logits.shape().to_vec(), coef).expect("same shape as logits"))
}

fn keep_top_m(v: &[f32], m: usize) -> Vec<f32> {
    if m >= v.len() {
        return v.to_vec();
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut out = vec![0.0; v.len()];
    for &i in &order[..m] {
        out[i] = v[i];
    }
    out
}

fn audit(logits: &Tensor, wanted: &[usize], s: usize) -> Result<Vec<ConstraintOutcome>> {
    let pred = logits.argmax_rows()?;
    Ok(wanted
        .iter()
        .zip(&pred)
        .enumerate()
        .map(|(i, (&w, &p))| ConstraintOutcome {
            image: i,
            kind: if i < s { ConstraintKind::Target } else { ConstraintKind::Keep },
            wanted: w,
            predicted: p,
            satisfied: w == p,
        })
        .collect())
}

/// Modifies `cfg.layer` so the first `S` constrained images take their
/// target labels while the other `R - S` keep their current predictions.
/// Accuracy before and after is measured on `eval`.
pub fn fsa_attack(model: &Model, constrained: &LabeledBatch, eval: &LabeledBatch, cfg: &FsaConfig) -> Result<AttackOutcome> {
    cfg.validate(constrained)?;
    let wi = model.weight_index(&cfg.layer)?;
    let is_classifier = cfg.layer == model.classifier_layer();
    let objective = Objective {
        images: &constrained.images,
        embeddings: if is_classifier { Some(model.encode(&constrained.images)?) } else { None },
        layer: cfg.layer.clone(),
    };
    let original_pred = objective.logits(model)?.argmax_rows()?;
    let mut wanted = cfg.target_labels.clone();
    wanted.extend_from_slice(&original_pred[cfg.s..]);

    let mut m = model.clone();
    m.drop_view(&cfg.layer);
    let w0 = model.params()[wi].tensor.data().to_vec();
    let n = w0.len();
    let keep = ((cfg.keep_fraction * n as f32).round() as usize).clamp(1, n);
    let mut delta = vec![0.0f32; n];
    let mut z = vec![0.0f32; n];
    let mut u = vec![0.0f32; n];
    let install = |m: &mut Model, d: &[f32]| {
        for ((w, &base), &dv) in m.params_mut()[wi].tensor.data_mut().iter_mut().zip(&w0).zip(d) {
            *w = base + dv;
        }
    };

    let (start_loss, _) = hinge_coefficients(&objective.logits(&m)?, &wanted, cfg.margin);
    let mut trajectory = vec![start_loss];
    let mut iterations = 0;
    let mut success = false;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        for _ in 0..cfg.inner_steps {
            install(&mut m, &delta);
            let (_, grad) = objective.hinge_grad(&m, &wanted, cfg.margin)?;
            for i in 0..n {
                let gi = grad[i] + cfg.admm_rho * (delta[i] - z[i] + u[i]);
                delta[i] -= cfg.lr * gi;
            }
        }
        let v: Vec<f32> = delta.iter().zip(&u).map(|(d, u)| d + u).collect();
        z = match cfg.norm {
            FsaNorm::L2 => {
                let shrink = cfg.admm_rho / (2.0 * cfg.penalty + cfg.admm_rho);
                v.iter().map(|x| x * shrink).collect()
            }
            FsaNorm::L0 => keep_top_m(&v, keep),
        };
        for i in 0..n {
            u[i] += delta[i] - z[i];
        }
        install(&mut m, &z);
        let logits = objective.logits(&m)?;
        let (loss, _) = hinge_coefficients(&logits, &wanted, cfg.margin);
        trajectory.push(loss);
        if audit(&logits, &wanted, cfg.s)?.iter().all(|c| c.satisfied) {
            success = true;
            break;
        }
    }
    install(&mut m, &z);
    let constraints = audit(&objective.logits(&m)?, &wanted, cfg.s)?;

    let report = AttackReport {
        attack_kind: match cfg.norm {
            FsaNorm::L0 => AttackKind::FsaL0,
            FsaNorm::L2 => AttackKind::FsaL2,
        },
        layers_touched: touched(model, std::slice::from_ref(&cfg.layer))?,
        params_modified: count_modified(model, &m),
        bits_flipped: 0,
        acc_before: model.accuracy_on(eval)?,
        acc_after: m.accuracy_on(eval)?,
        iterations,
        success,
        objective_trajectory: trajectory,
        constraints,
    };
    Ok(AttackOutcome { model: m, report })
}
