//! Fault detection by comparing a batch's contrastive loss with the clean
//! model's reference.
//!
//! Detection is read-only: it takes the model by shared reference, so it can
//! share a snapshot with inference but must not overlap with an attack or a
//! recovery run on the same model.

use rand::seq::index;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::contrastive::{
    augment_pair, contrastive_loss_on, AugmentationConfig, ContrastiveBatch, LossConfig, DEFAULT_BATCH,
};
use crate::error::{CfdrError, Result};
use crate::model::Model;
use crate::rng;
use crate::tensor::{Graph, Tensor};

/// Minimum sample count for a profile to be used for detection.
pub const MIN_PROFILE_SAMPLES: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub augment: AugmentationConfig,
    pub loss: LossConfig,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            augment: AugmentationConfig::default(),
            loss: LossConfig::default(),
            batch_size: DEFAULT_BATCH,
            seed: 0,
        }
    }
}

fn json_hash<T: Serialize>(v: &T) -> String {
    hex::encode(Sha256::digest(serde_json::to_vec(v).expect("config serializes")))
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        self.loss.validate()?;
        if self.batch_size < 2 {
            return Err(CfdrError::InvalidConfig("detection batch must hold at least 2 images".into()));
        }
        Ok(())
    }

    /// Hash of the loss settings; the augmentation seed is excluded from
    /// the augmentation hash since it only selects draws.
    pub fn hashes(&self) -> (String, String) {
        let aug = AugmentationConfig {
            seed: 0,
            ..self.augment.clone()
        };
        (json_hash(&self.loss), json_hash(&aug))
    }
}

/// Which family of sampled batches a draw belongs to. Reference draws and
/// detection draws never coincide.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStream {
    Reference,
    Detect,
}

impl SampleStream {
    fn name(self) -> &'static str {
        match self {
            SampleStream::Reference => "detect-reference",
            SampleStream::Detect => "detect-trial",
        }
    }
}

/// Image indices and augmented pair for draw `i` of a stream.
pub fn sampled_batch(images: &Tensor, cfg: &DetectorConfig, stream: SampleStream, i: u64) -> Result<ContrastiveBatch> {
    let n = images.shape()[0];
    if n < cfg.batch_size {
        return Err(CfdrError::InvalidInput(format!(
            "detection data holds {n} images, fewer than one batch of {}",
            cfg.batch_size
        )));
    }
    let mut r = rng::substream(cfg.seed, stream.name(), i);
    let mut picks = index::sample(&mut r, n, cfg.batch_size).into_vec();
    picks.sort_unstable();
    let batch = images.gather_rows(&picks)?;
    let aug = AugmentationConfig {
        seed: rng::derive_seed(cfg.seed, stream.name(), u64::MAX),
        ..cfg.augment.clone()
    };
    augment_pair(&batch, &aug, i)
}

/// Forward pass feeding the projection head and, when `raw` is given, the
/// classifier in parallel. Returns the loss and the raw batch's logits.
fn parallel_forward(model: &Model, raw: Option<&Tensor>, pair: &ContrastiveBatch, loss: &LossConfig) -> Result<(f32, Option<Tensor>)> {
    let n = pair.len();
    if n < 2 {
        return Err(CfdrError::InvalidInput("contrastive batch needs at least 2 images".into()));
    }
    let mut g = Graph::inference();
    let bound = model.bind(&mut g, |_| false);
    let mut parts = vec![g.constant(pair.view_a.clone()), g.constant(pair.view_b.clone())];
    let raw_rows = raw.map_or(0, |r| r.shape()[0]);
    if let Some(r) = raw {
        parts.push(g.constant(r.clone()));
    }
    let x = g.concat(&parts)?;
    let h = model.encode_on(&mut g, &bound, x)?;
    let hv = g.slice_rows(h, 0, 2 * n)?;
    let z = model.project_on(&mut g, &bound, hv)?;
    let za = g.slice_rows(z, 0, n)?;
    let zb = g.slice_rows(z, n, 2 * n)?;
    let l = contrastive_loss_on(&mut g, za, zb, loss)?;
    let value = g.value(l).item()?;
    let logits = if raw_rows > 0 {
        let hr = g.slice_rows(h, 2 * n, 2 * n + raw_rows)?;
        let lg = model.classify_on(&mut g, &bound, hr)?;
        Some(g.value(lg).clone())
    } else {
        None
    };
    Ok((value, logits))
}

/// Contrastive loss of one augmented batch. Forward-only.
pub fn sample_loss(model: &Model, pair: &ContrastiveBatch, loss: &LossConfig) -> Result<f32> {
    Ok(parallel_forward(model, None, pair, loss)?.0)
}

/// Classifies `images` and measures the detection loss of an augmented pair
/// in the same forward pass.
pub fn infer_with_detection(model: &Model, images: &Tensor, pair: &ContrastiveBatch, loss: &LossConfig) -> Result<(Tensor, f32)> {
    let (l, logits) = parallel_forward(model, Some(images), pair, loss)?;
    Ok((logits.expect("raw batch supplied"), l))
}

/// Losses of draws `start..start + count` from a stream.
pub fn sample_losses(
    model: &Model,
    images: &Tensor,
    cfg: &DetectorConfig,
    stream: SampleStream,
    start: u64,
    count: usize,
) -> Result<Vec<f32>> {
    cfg.validate()?;
    (0..count as u64)
        .map(|i| {
            let pair = sampled_batch(images, cfg, stream, start + i)?;
            sample_loss(model, &pair, &cfg.loss)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceProfile {
    pub l_c: f32,
    pub sigma_c: f32,
    pub n_samples: usize,
    pub batch_size: usize,
    pub loss_cfg_hash: String,
    pub aug_cfg_hash: String,
    pub samples: Vec<f32>,
}

impl ReferenceProfile {
    pub fn from_samples(samples: Vec<f32>, cfg: &DetectorConfig) -> Result<Self> {
        if samples.is_empty() {
            return Err(CfdrError::InvalidInput("reference profile needs at least one sample".into()));
        }
        let n = samples.len() as f64;
        let mean = samples.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = samples.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let (loss_cfg_hash, aug_cfg_hash) = cfg.hashes();
        Ok(ReferenceProfile {
            l_c: mean as f32,
            sigma_c: var.sqrt() as f32,
            n_samples: samples.len(),
            batch_size: cfg.batch_size,
            loss_cfg_hash,
            aug_cfg_hash,
            samples,
        })
    }

    /// Whether enough samples back the statistics for detection.
    pub fn is_valid(&self) -> bool {
        self.n_samples >= MIN_PROFILE_SAMPLES
    }

    /// `max(3 sigma_c, 0.05 |l_c|)`.
    pub fn default_delta(&self) -> f32 {
        (3.0 * self.sigma_c).max(0.05 * self.l_c.abs())
    }

    fn check_compatible(&self, cfg: &DetectorConfig) -> Result<()> {
        if !self.is_valid() {
            return Err(CfdrError::InvalidInput(format!(
                "reference profile has {} samples; at least {MIN_PROFILE_SAMPLES} are required",
                self.n_samples
            )));
        }
        let (l, a) = cfg.hashes();
        if l != self.loss_cfg_hash || a != self.aug_cfg_hash || cfg.batch_size != self.batch_size {
            return Err(CfdrError::InvalidConfig(
                "detector configuration differs from the one the profile was built with".into(),
            ));
        }
        Ok(())
    }
}

/// Mean and population standard deviation of the clean model's loss over
/// `n_samples` independently drawn and augmented batches.
pub fn build_reference(model: &Model, images: &Tensor, n_samples: usize, cfg: &DetectorConfig) -> Result<ReferenceProfile> {
    let samples = sample_losses(model, images, cfg, SampleStream::Reference, 0, n_samples)?;
    ReferenceProfile::from_samples(samples, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionVerdict {
    pub l_d: f32,
    pub l_c: f32,
    pub delta: f32,
    pub attacked: bool,
    pub batches_used: usize,
}

impl DetectionVerdict {
    pub fn new(l_d: f32, l_c: f32, delta: f32, batches_used: usize) -> Self {
        DetectionVerdict {
            l_d,
            l_c,
            delta,
            attacked: (l_d - l_c).abs() > delta,
            batches_used,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("verdict serializes")
    }
}

/// Flags the model when the mean loss of `n_batches` detection draws,
/// starting at draw `start`, differs from `l_c` by more than `delta`.
pub fn detect(
    profile: &ReferenceProfile,
    model: &Model,
    images: &Tensor,
    cfg: &DetectorConfig,
    delta: f32,
    n_batches: usize,
    start: u64,
) -> Result<DetectionVerdict> {
    if !(delta > 0.0) {
        return Err(CfdrError::InvalidConfig(format!("delta must be positive, got {delta}")));
    }
    if n_batches == 0 {
        return Err(CfdrError::InvalidConfig("n_batches must be at least 1".into()));
    }
    profile.check_compatible(cfg)?;
    let losses = sample_losses(model, images, cfg, SampleStream::Detect, start, n_batches)?;
    let l_d = (losses.iter().map(|&v| v as f64).sum::<f64>() / n_batches as f64) as f32;
    if !l_d.is_finite() {
        log::warn!("detection loss is not finite; treating the model as attacked");
    }
    let mut v = DetectionVerdict::new(l_d, profile.l_c, delta, n_batches);
    v.attacked |= !l_d.is_finite();
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn images(n: usize) -> Tensor {
        let len = n * 3 * 8 * 8;
        Tensor::new(vec![n, 3, 8, 8], (0..len).map(|i| ((i * 31) % 97) as f32 / 96.0).collect()).unwrap()
    }

    fn cfg() -> DetectorConfig {
        DetectorConfig {
            batch_size: 4,
            seed: 5,
            ..Default::default()
        }
    }

    #[test]
    fn single_sample_has_zero_sigma() {
        let m = Model::build(ModelConfig::tiny(1)).unwrap();
        let p = build_reference(&m, &images(8), 1, &cfg()).unwrap();
        assert_eq!(p.sigma_c, 0.0);
        assert!(!p.is_valid());
    }

    #[test]
    fn reference_is_deterministic_and_reproducible() {
        let m = Model::build(ModelConfig::tiny(1)).unwrap();
        let x = images(8);
        let a = build_reference(&m, &x, 3, &cfg()).unwrap();
        assert_eq!(a, build_reference(&m, &x, 3, &cfg()).unwrap());
        let pair = sampled_batch(&x, &cfg(), SampleStream::Reference, 2).unwrap();
        assert_eq!(sample_loss(&m, &pair, &cfg().loss).unwrap(), a.samples[2]);
    }

    #[test]
    fn parallel_path_matches_plain_inference() {
        let m = Model::build(ModelConfig::tiny(1)).unwrap();
        let x = images(8);
        let pair = sampled_batch(&x, &cfg(), SampleStream::Detect, 0).unwrap();
        let (logits, l) = infer_with_detection(&m, &x, &pair, &cfg().loss).unwrap();
        assert_eq!(l, sample_loss(&m, &pair, &cfg().loss).unwrap());
        let plain = m.logits(&x).unwrap();
        for (a, b) in logits.data().iter().zip(plain.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn verdict_rule() {
        assert!(!DetectionVerdict::new(1.0, 1.0, 0.1, 1).attacked);
        assert!(DetectionVerdict::new(1.2, 1.0, 0.1, 1).attacked);
        assert!(DetectionVerdict::new(0.8, 1.0, 0.1, 1).attacked);
    }

    #[test]
    fn bad_inputs() {
        let m = Model::build(ModelConfig::tiny(1)).unwrap();
        assert!(build_reference(&m, &images(3), 2, &cfg()).is_err());
        let p = ReferenceProfile::from_samples(vec![1.0; 40], &cfg()).unwrap();
        assert!(detect(&p, &m, &images(8), &cfg(), 0.0, 1, 0).is_err());
        let other = DetectorConfig { batch_size: 6, ..cfg() };
        assert!(detect(&p, &m, &images(8), &other, 0.1, 1, 0).is_err());
    }
}
