//! Temperature-scaled contrastive loss over cosine similarities.

use serde::{Deserialize, Serialize};

use crate::error::{CfdrError, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// For pair `n` the denominator holds only the `2(N-1)` cross-view
    /// negatives `sim(b_n, a_k)` and `sim(a_n, b_k)`, `k != n`. The positive
    /// pair is not part of it, so the loss can go negative.
    CrossViewNegatives,
    /// NT-Xent over all `2N` anchors; each denominator holds every other
    /// embedding, positive included.
    NtXent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f32,
    pub reduction: Reduction,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.5,
            reduction: Reduction::Sum,
            variant: LossVariant::CrossViewNegatives,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CfdrError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine_sim(u: &[f32], v: &[f32]) -> Result<f32> {
    if u.len() != v.len() {
        return Err(CfdrError::ShapeMismatch {
            op: "cosine_sim",
            left: vec![u.len()],
            right: vec![v.len()],
        });
    }
    let dot: f64 = u.iter().zip(v).map(|(&a, &b)| a as f64 * b as f64).sum();
    let nu: f64 = u.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    let nv: f64 = v.iter().map(|&a| (a as f64).powi(2)).sum::<f64>().sqrt();
    if nu == 0.0 || nv == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0) as f32)
}

fn identity_mask(n: usize) -> Tensor {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    Tensor::new(vec![n, n], m).expect("n > 0")
}

fn off_diagonal_mask(n: usize) -> Tensor {
    let mut m = vec![1.0; n * n];
    for i in 0..n {
        m[i * n + i] = 0.0;
    }
    Tensor::new(vec![n, n], m).expect("n > 0")
}

/// Taped contrastive loss between projections of view a (`z_a`) and view b
/// (`z_b`). Rows are ℓ2-normalized internally.
pub fn contrastive_loss_on(g: &mut Graph, z_a: Var, z_b: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    let (sa, sb) = (g.value(z_a).shape().to_vec(), g.value(z_b).shape().to_vec());
    if sa.len() != 2 || sa != sb {
        return Err(CfdrError::ShapeMismatch {
            op: "contrastive_loss",
            left: sa,
            right: sb,
        });
    }
    let n = sa[0];
    if n < 2 {
        return Err(CfdrError::InvalidInput(format!(
            "contrastive loss needs at least 2 pairs, got {n}"
        )));
    }
    let inv_t = 1.0 / cfg.temperature;
    let a = g.l2_normalize(z_a)?;
    let b = g.l2_normalize(z_b)?;
    // Similarities are bounded by 1, so shifting logits by -1/τ keeps exp finite.
    let (terms, count) = match cfg.variant {
        LossVariant::CrossViewNegatives => {
            // sims[n][k] = sim(b_n, a_k); the transpose holds sim(a_n, b_k).
            let at = g.transpose(a)?;
            let sims = g.matmul(b, at)?;
            let logits = g.scale(sims, inv_t)?;
            let shifted = g.add_scalar(logits, -inv_t)?;
            let e = g.exp(shifted)?;
            let off = g.constant(off_diagonal_mask(n));
            let neg = g.mul(e, off)?;
            let rows = g.sum_axis(neg, 1)?;
            let cols = g.sum_axis(neg, 0)?;
            let den = g.add(rows, cols)?;
            let log_den = g.log(den)?;
            let eye = g.constant(identity_mask(n));
            let pos = g.mul(logits, eye)?;
            let pos = g.sum_axis(pos, 1)?;
            let pos = g.add_scalar(pos, -inv_t)?;
            let neg_pos = g.scale(pos, -1.0)?;
            (g.add(log_den, neg_pos)?, n)
        }
        LossVariant::NtXent => {
            let z = g.concat(&[a, b])?;
            let zt = g.transpose(z)?;
            let sims = g.matmul(z, zt)?;
            let logits = g.scale(sims, inv_t)?;
            let shifted = g.add_scalar(logits, -inv_t)?;
            let e = g.exp(shifted)?;
            let off = g.constant(off_diagonal_mask(2 * n));
            let others = g.mul(e, off)?;
            let den = g.sum_axis(others, 1)?;
            let log_den = g.log(den)?;
            let mut pm = vec![0.0; 4 * n * n];
            for i in 0..n {
                pm[i * 2 * n + n + i] = 1.0;
                pm[(n + i) * 2 * n + i] = 1.0;
            }
            let pmask = g.constant(Tensor::new(vec![2 * n, 2 * n], pm)?);
            let pos = g.mul(shifted, pmask)?;
            let pos = g.sum_axis(pos, 1)?;
            let neg_pos = g.scale(pos, -1.0)?;
            (g.add(log_den, neg_pos)?, 2 * n)
        }
    };
    let total = g.sum(terms)?;
    match cfg.reduction {
        Reduction::Sum => Ok(total),
        Reduction::Mean => g.scale(total, 1.0 / count as f32),
    }
}

/// Forward-only evaluation of [`contrastive_loss_on`].
pub fn contrastive_loss(z_a: &Tensor, z_b: &Tensor, cfg: &LossConfig) -> Result<f32> {
    let mut g = Graph::inference();
    let a = g.constant(z_a.clone());
    let b = g.constant(z_b.clone());
    let l = contrastive_loss_on(&mut g, a, b, cfg)?;
    g.value(l).item()
}
