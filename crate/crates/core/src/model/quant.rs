use serde::{Deserialize, Serialize};

use crate::error::{CfdrError, Result};

/// Per-layer symmetric two's-complement int8 view of a weight tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedLayerView {
    pub layer_name: String,
    pub scale: f32,
    pub qweights: Vec<i8>,
    /// Dequantized values currently installed in the model (`scale * q`).
    pub shadow: Vec<f32>,
}

impl QuantizedLayerView {
    /// `scale = max|w| / 127`, or 1 for an all-zero layer.
    pub fn from_weights(layer: &str, weights: &[f32]) -> Self {
        let max_abs = weights.iter().fold(0.0f32, |m, w| m.max(w.abs()));
        let scale = if max_abs > 0.0 { max_abs / 127.0 } else { 1.0 };
        let qweights: Vec<i8> = weights
            .iter()
            .map(|&w| (w / scale).round().clamp(-127.0, 127.0) as i8)
            .collect();
        Self::from_parts(layer, scale, qweights)
    }

    pub fn from_parts(layer: &str, scale: f32, qweights: Vec<i8>) -> Self {
        let shadow = qweights.iter().map(|&q| dequantize(q, scale)).collect();
        QuantizedLayerView {
            layer_name: layer.to_string(),
            scale,
            qweights,
            shadow,
        }
    }

    pub fn len(&self) -> usize {
        self.qweights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.qweights.is_empty()
    }

    /// Flips one bit and returns the new dequantized value.
    pub fn flip_bit(&mut self, index: usize, bit: u8) -> Result<f32> {
        if index >= self.qweights.len() {
            return Err(CfdrError::OutOfRange {
                what: "weight index",
                value: index,
                limit: self.qweights.len(),
            });
        }
        if bit > 7 {
            return Err(CfdrError::OutOfRange {
                what: "bit",
                value: bit as usize,
                limit: 8,
            });
        }
        let q = flipped(self.qweights[index], bit);
        self.qweights[index] = q;
        self.shadow[index] = dequantize(q, self.scale);
        Ok(self.shadow[index])
    }

    /// Change in the dequantized weight if `bit` of `index` were flipped.
    pub fn flip_delta(&self, index: usize, bit: u8) -> f32 {
        let q = self.qweights[index];
        dequantize(flipped(q, bit), self.scale) - dequantize(q, self.scale)
    }
}

pub fn flipped(q: i8, bit: u8) -> i8 {
    ((q as u8) ^ (1u8 << bit)) as i8
}

pub fn dequantize(q: i8, scale: f32) -> f32 {
    q as f32 * scale
}
