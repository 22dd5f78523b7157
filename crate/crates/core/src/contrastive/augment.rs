//! Stochastic augmentation producing positive pairs.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{CfdrError, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    /// Fraction of the image area kept by the random crop, `(lo, hi)`.
    pub crop_scale_range: (f32, f32),
    pub flip_prob: f32,
    /// Brightness and contrast factors are drawn from `[1 - s, 1 + s]`.
    pub jitter_strength: f32,
    pub grayscale_prob: f32,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            crop_scale_range: (0.6, 1.0),
            flip_prob: 0.5,
            jitter_strength: 0.4,
            grayscale_prob: 0.1,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// A configuration under which both views equal the input.
    pub fn identity() -> Self {
        AugmentationConfig {
            crop_scale_range: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_strength: 0.0,
            grayscale_prob: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale_range;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(CfdrError::InvalidConfig(format!(
                "crop_scale_range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
            )));
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("grayscale_prob", self.grayscale_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CfdrError::InvalidConfig(format!("{name} must be in [0, 1], got {p}")));
            }
        }
        if !(self.jitter_strength >= 0.0) {
            return Err(CfdrError::InvalidConfig("jitter_strength must be >= 0".into()));
        }
        Ok(())
    }
}

/// Two augmented views per image; row `n` of both views comes from input `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct ContrastiveBatch {
    pub view_a: Tensor,
    pub view_b: Tensor,
}

impl ContrastiveBatch {
    pub fn len(&self) -> usize {
        self.view_a.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Draws two independent augmentations of every image. The randomness is a
/// pure function of `(cfg.seed, batch_index)`.
pub fn augment_pair(images: &Tensor, cfg: &AugmentationConfig, batch_index: u64) -> Result<ContrastiveBatch> {
    cfg.validate()?;
    let s = images.shape();
    if s.len() != 4 {
        return Err(CfdrError::InvalidShape {
            shape: s.to_vec(),
            reason: "augment_pair expects [N, C, H, W]".into(),
        });
    }
    if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(CfdrError::InvalidInput("pixel values must lie in [0, 1]".into()));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let per = c * h * w;
    let mut a = vec![0.0; n * per];
    let mut b = vec![0.0; n * per];
    let mut r = rng::substream(cfg.seed, "augment", batch_index);
    for i in 0..n {
        let src = &images.data()[i * per..(i + 1) * per];
        augment_one(src, c, h, w, cfg, &mut r, &mut a[i * per..(i + 1) * per]);
        augment_one(src, c, h, w, cfg, &mut r, &mut b[i * per..(i + 1) * per]);
    }
    Ok(ContrastiveBatch {
        view_a: Tensor::new(s.to_vec(), a)?,
        view_b: Tensor::new(s.to_vec(), b)?,
    })
}

fn augment_one(src: &[f32], c: usize, h: usize, w: usize, cfg: &AugmentationConfig, r: &mut Rng, out: &mut [f32]) {
    // All draws happen unconditionally so the stream layout is config-independent.
    let (lo, hi) = cfg.crop_scale_range;
    let area: f32 = if hi > lo { r.gen_range(lo..=hi) } else { lo };
    let ch = ((h as f32 * area.sqrt()).round() as usize).clamp(1, h);
    let cw = ((w as f32 * area.sqrt()).round() as usize).clamp(1, w);
    let top = r.gen_range(0..=h - ch);
    let left = r.gen_range(0..=w - cw);
    let flip = r.gen::<f32>() < cfg.flip_prob;
    let s = cfg.jitter_strength;
    let (u1, u2): (f32, f32) = (r.gen(), r.gen());
    let brightness = 1.0 + s * (2.0 * u1 - 1.0);
    let contrast = 1.0 + s * (2.0 * u2 - 1.0);
    let gray = r.gen::<f32>() < cfg.grayscale_prob;

    let hw = h * w;
    if ch == h && cw == w {
        out.copy_from_slice(src);
    } else {
        resize_crop(src, c, h, w, top, left, ch, cw, out);
    }
    if flip {
        for plane in out.chunks_mut(hw) {
            for row in plane.chunks_mut(w) {
                row.reverse();
            }
        }
    }
    if s > 0.0 {
        for v in out.iter_mut() {
            *v *= brightness;
        }
        let mean = out.iter().sum::<f32>() / out.len() as f32;
        for v in out.iter_mut() {
            *v = (*v - mean) * contrast + mean;
        }
    }
    if gray && c == 3 {
        for p in 0..hw {
            let y = 0.299 * out[p] + 0.587 * out[hw + p] + 0.114 * out[2 * hw + p];
            out[p] = y;
            out[hw + p] = y;
            out[2 * hw + p] = y;
        }
    }
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Bilinear resize of the crop `[top..top+ch, left..left+cw]` back to `h×w`.
#[allow(clippy::too_many_arguments)]
fn resize_crop(src: &[f32], c: usize, h: usize, w: usize, top: usize, left: usize, ch: usize, cw: usize, out: &mut [f32]) {
    let sy = ch as f32 / h as f32;
    let sx = cw as f32 / w as f32;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for y in 0..h {
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f32);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(ch - 1);
            let ty = fy - y0 as f32;
            for x in 0..w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f32);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(cw - 1);
                let tx = fx - x0 as f32;
                let at = |yy: usize, xx: usize| plane[(top + yy) * w + left + xx];
                let v = (1.0 - ty) * ((1.0 - tx) * at(y0, x0) + tx * at(y0, x1))
                    + ty * ((1.0 - tx) * at(y1, x0) + tx * at(y1, x1));
                out[ci * h * w + y * w + x] = v;
            }
        }
    }
}
