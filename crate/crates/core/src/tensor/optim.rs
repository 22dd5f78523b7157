use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{CfdrError, Result};

pub const ADAM_BETA1: f32 = 0.9;
pub const ADAM_BETA2: f32 = 0.999;
pub const ADAM_EPS: f32 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// A named trainable tensor plus its Adam moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    m: Vec<f32>,
    v: Vec<f32>,
    steps: u64,
}

impl Parameter {
    pub fn new(name: impl Into<String>, tensor: Tensor) -> Self {
        let n = tensor.numel();
        Parameter {
            name: name.into(),
            tensor,
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn numel(&self) -> usize {
        self.tensor.numel()
    }

    /// Drops accumulated moments so a fresh optimizer run starts cold.
    pub fn reset_optimizer_state(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.steps = 0;
    }

    fn step(&mut self, lr: f32, kind: OptimizerKind) -> Result<()> {
        let grad = self
            .tensor
            .grad()
            .ok_or_else(|| CfdrError::MissingGrad(self.name.clone()))?
            .to_vec();
        match kind {
            OptimizerKind::Sgd => {
                for (w, g) in self.tensor.data_mut().iter_mut().zip(&grad) {
                    *w -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                self.steps += 1;
                let t = self.steps as i32;
                let bc1 = 1.0 - ADAM_BETA1.powi(t);
                let bc2 = 1.0 - ADAM_BETA2.powi(t);
                let (m, v) = (&mut self.m, &mut self.v);
                for (((w, g), m), v) in self.tensor.data_mut().iter_mut().zip(&grad).zip(m).zip(v) {
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    let mh = *m / bc1;
                    let vh = *v / bc2;
                    *w -= lr * mh / (vh.sqrt() + ADAM_EPS);
                }
            }
        }
        Ok(())
    }
}

/// Updates every parameter in place. Fails (before touching anything) if any
/// parameter lacks a gradient. Gradients are left as they are.
pub fn optimizer_step(params: &mut [&mut Parameter], lr: f32, kind: OptimizerKind) -> Result<()> {
    if let Some(p) = params.iter().find(|p| p.tensor.grad().is_none()) {
        return Err(CfdrError::MissingGrad(p.name.clone()));
    }
    for p in params.iter_mut() {
        p.step(lr, kind)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(w: f32, g: Option<f32>) -> Parameter {
        let mut p = Parameter::new("w", Tensor::vector(vec![w]).unwrap());
        if let Some(g) = g {
            p.tensor.set_grad(vec![g]).unwrap();
        }
        p
    }

    #[test]
    fn sgd_step() {
        let mut p = param(1.0, Some(0.5));
        optimizer_step(&mut [&mut p], 0.1, OptimizerKind::Sgd).unwrap();
        assert!((p.tensor.data()[0] - 0.95).abs() < 1e-7);
        assert_eq!(p.tensor.grad(), Some(&[0.5f32][..]));
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        let lr = 1e-3;
        let mut p = param(1.0, Some(1.0));
        optimizer_step(&mut [&mut p], lr, OptimizerKind::Adam).unwrap();
        let expected = 1.0 - lr * 1.0 / (1.0 + ADAM_EPS);
        assert!((p.tensor.data()[0] - expected).abs() < 1e-7);
    }

    #[test]
    fn step_after_zero_grad_fails() {
        let mut p = param(1.0, Some(1.0));
        p.tensor.zero_grad();
        let err = optimizer_step(&mut [&mut p], 0.1, OptimizerKind::Sgd).unwrap_err();
        assert!(matches!(err, CfdrError::MissingGrad(n) if n == "w"));
    }

    #[test]
    fn missing_grad_leaves_others_untouched() {
        let mut a = param(1.0, Some(1.0));
        let mut b = param(2.0, None);
        assert!(optimizer_step(&mut [&mut a, &mut b], 0.1, OptimizerKind::Sgd).is_err());
        assert_eq!(a.tensor.data()[0], 1.0);
    }
}
