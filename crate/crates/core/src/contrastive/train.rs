//! Phase (a) contrastive training and Phase (b) classifier fine-tuning.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::augment::{augment_pair, AugmentationConfig};
use super::loss::{contrastive_loss_on, LossConfig};
use crate::error::{CfdrError, Result};
use crate::model::{Model, ParamGroup};
use crate::rng;
use crate::tensor::{optimizer_step, Graph, OptimizerKind, Tensor};

pub const DEFAULT_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f32,
    /// Steps over which the learning rate ramps linearly up to `lr`.
    #[serde(default)]
    pub warmup_steps: usize,
}

impl OptimizerConfig {
    pub fn adam(lr: f32) -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr,
            warmup_steps: 0,
        }
    }

    /// Learning rate for global step `step` (0-based).
    pub fn lr_at(&self, step: u64) -> f32 {
        if (step as usize) < self.warmup_steps {
            self.lr * (step + 1) as f32 / self.warmup_steps as f32
        } else {
            self.lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f32,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochStat>,
}

impl TrainLog {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn losses(&self) -> Vec<f32> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }

    pub fn last_loss(&self) -> Option<f32> {
        self.epochs.last().map(|e| e.mean_loss)
    }

    /// CSV with header `epoch,mean_loss,wall_ms`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epoch", "mean_loss", "wall_ms"])?;
        for e in &self.epochs {
            wtr.write_record([e.epoch.to_string(), e.mean_loss.to_string(), e.wall_ms.to_string()])?;
        }
        wtr.flush().map_err(|e| CfdrError::io("<csv>", e))?;
        Ok(())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        Ok(String::from_utf8(buf).expect("csv is utf-8"))
    }
}

/// Phase (a): encoder and projection head under the contrastive loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseAConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub augment: AugmentationConfig,
    pub loss: LossConfig,
    pub optimizer: OptimizerConfig,
    /// Keep the projection head fixed and train only the encoder.
    pub freeze_head: bool,
    pub seed: u64,
}

impl Default for PhaseAConfig {
    fn default() -> Self {
        PhaseAConfig {
            epochs: 50,
            batch_size: DEFAULT_BATCH,
            augment: AugmentationConfig::default(),
            loss: LossConfig::default(),
            optimizer: OptimizerConfig::adam(1e-3),
            freeze_head: false,
            seed: 0,
        }
    }
}

impl PhaseAConfig {
    /// The full-budget schedule (1000 epochs); not meant for desk runs.
    pub fn full_schedule() -> Self {
        PhaseAConfig {
            epochs: 1000,
            ..Default::default()
        }
    }
}

/// Phase (b): the FC classifier under cross-entropy with the encoder frozen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhaseBConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
}

impl Default for PhaseBConfig {
    fn default() -> Self {
        PhaseBConfig {
            epochs: 20,
            batch_size: DEFAULT_BATCH,
            optimizer: OptimizerConfig::adam(5e-3),
            seed: 0,
        }
    }
}

impl PhaseBConfig {
    /// The full-budget schedule (100 epochs).
    pub fn full_schedule() -> Self {
        PhaseBConfig {
            epochs: 100,
            ..Default::default()
        }
    }
}

#[cfg(test)]
fn is_contrastive_param(name: &str) -> bool {
    matches!(ParamGroup::of(name), ParamGroup::Encoder | ParamGroup::Head)
}

fn is_classifier_param(name: &str) -> bool {
    ParamGroup::of(name) == ParamGroup::Classifier
}

/// Loss (and optionally gradients) for one contrastive batch. Both views
/// go through the encoder in a single stacked forward pass.
pub(crate) fn contrastive_step(
    model: &mut Model,
    batch: &Tensor,
    augment: &AugmentationConfig,
    loss: &LossConfig,
    batch_index: u64,
    optimizer: Option<&OptimizerConfig>,
    freeze_head: bool,
) -> Result<f32> {
    let trainable = |name: &str| match ParamGroup::of(name) {
        ParamGroup::Encoder => true,
        ParamGroup::Head => !freeze_head,
        ParamGroup::Classifier => false,
    };
    let pair = augment_pair(batch, augment, batch_index)?;
    let n = pair.len();
    let mut g = if optimizer.is_some() { Graph::new() } else { Graph::inference() };
    let bound = model.bind(&mut g, trainable);
    let va = g.constant(pair.view_a);
    let vb = g.constant(pair.view_b);
    let x = g.concat(&[va, vb])?;
    let h = model.encode_on(&mut g, &bound, x)?;
    let z = model.project_on(&mut g, &bound, h)?;
    let za = g.slice_rows(z, 0, n)?;
    let zb = g.slice_rows(z, n, 2 * n)?;
    let l = contrastive_loss_on(&mut g, za, zb, loss)?;
    let value = g.value(l).item()?;
    if !value.is_finite() {
        return Err(CfdrError::InvalidInput(format!("contrastive loss is not finite ({value})")));
    }
    if let Some(opt) = optimizer {
        g.backward(l)?;
        model.absorb_grads(&g, &bound);
        let mut params = model.params_where(trainable);
        optimizer_step(&mut params, opt.lr_at(batch_index), opt.kind)?;
        model.zero_grad();
    }
    Ok(value)
}

fn batch_plan(n: usize, batch: usize) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(CfdrError::InvalidInput(format!("need at least 2 images, got {n}")));
    }
    if batch < 2 {
        return Err(CfdrError::InvalidConfig("batch size must be >= 2".into()));
    }
    let b = batch.min(n);
    Ok((b, n / b))
}

/// One pass of contrastive training over `images`; returns the mean batch loss.
/// Partial trailing batches are dropped so every step sees `batch` pairs.
pub(crate) fn contrastive_epoch(
    model: &mut Model,
    images: &Tensor,
    cfg: &PhaseAConfig,
    epoch: usize,
) -> Result<f32> {
    let n = images.shape()[0];
    let (b, steps) = batch_plan(n, cfg.batch_size)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(cfg.seed, "shuffle-a", epoch as u64));
    let mut total = 0.0f64;
    for s in 0..steps {
        let batch = images.gather_rows(&order[s * b..(s + 1) * b])?;
        let idx = (epoch * steps + s) as u64;
        total += contrastive_step(model, &batch, &cfg.augment, &cfg.loss, idx, Some(&cfg.optimizer), cfg.freeze_head)? as f64;
    }
    Ok((total / steps as f64) as f32)
}

/// Contrastive training of encoder and projection head. Labels never enter;
/// the classifier is left untouched.
pub fn train_phase_a(model: &mut Model, images: &Tensor, cfg: &PhaseAConfig) -> Result<TrainLog> {
    cfg.augment.validate()?;
    cfg.loss.validate()?;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mean_loss = contrastive_epoch(model, images, cfg, epoch)?;
        log::debug!("phase a epoch {epoch}: loss {mean_loss:.4}");
        log.epochs.push(EpochStat {
            epoch,
            mean_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    if cfg.epochs > 0 {
        model.metadata.phase = "phase_a".into();
    }
    Ok(log)
}

/// Embeddings for every image, computed once since the encoder is frozen.
pub fn embed_all(model: &Model, images: &Tensor) -> Result<Tensor> {
    let n = images.shape()[0];
    let d = model.embedding_dim();
    let mut data = Vec::with_capacity(n * d);
    let mut start = 0;
    while start < n {
        let end = (start + 256).min(n);
        data.extend_from_slice(model.encode(&images.slice_rows(start, end)?)?.data());
        start = end;
    }
    Tensor::new(vec![n, d], data)
}

pub(crate) fn classifier_epoch(
    model: &mut Model,
    embeddings: &Tensor,
    labels: &[usize],
    cfg: &PhaseBConfig,
    epoch: usize,
) -> Result<f32> {
    let n = embeddings.shape()[0];
    let b = cfg.batch_size.clamp(1, n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::substream(cfg.seed, "shuffle-b", epoch as u64));
    let mut total = 0.0f64;
    let mut seen = 0usize;
    let steps = n.div_ceil(b);
    for (k, chunk) in order.chunks(b).enumerate() {
        let h = embeddings.gather_rows(chunk)?;
        let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, is_classifier_param);
        let hv = g.constant(h);
        let logits = model.classify_on(&mut g, &bound, hv)?;
        let ce = g.cross_entropy(logits, &y)?;
        total += g.value(ce).item()? as f64 * chunk.len() as f64;
        seen += chunk.len();
        g.backward(ce)?;
        model.absorb_grads(&g, &bound);
        let mut params = model.params_where(is_classifier_param);
        optimizer_step(&mut params, cfg.optimizer.lr_at((epoch * steps + k) as u64), cfg.optimizer.kind)?;
        model.zero_grad();
    }
    Ok((total / seen as f64) as f32)
}

pub(crate) fn check_labels(images: &Tensor, labels: &[usize], classes: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(CfdrError::InvalidInput("phase (b) needs labeled data".into()));
    }
    if labels.len() != images.shape()[0] {
        return Err(CfdrError::ShapeMismatch {
            op: "labels",
            left: images.shape().to_vec(),
            right: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(CfdrError::OutOfRange {
            what: "label",
            value: bad,
            limit: classes,
        });
    }
    Ok(())
}

/// Cross-entropy fine-tuning of the classifier only. Encoder and projection
/// head parameters are never handed to the optimizer.
pub fn train_phase_b(model: &mut Model, images: &Tensor, labels: &[usize], cfg: &PhaseBConfig) -> Result<TrainLog> {
    check_labels(images, labels, model.num_classes())?;
    let embeddings = embed_all(model, images)?;
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let mean_loss = classifier_epoch(model, &embeddings, labels, cfg, epoch)?;
        log::debug!("phase b epoch {epoch}: loss {mean_loss:.4}");
        log.epochs.push(EpochStat {
            epoch,
            mean_loss,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    if cfg.epochs > 0 {
        model.metadata.phase = "phase_b".into();
    }
    Ok(log)
}

/// Mean cross-entropy of the classifier over `images` (no updates).
pub fn classifier_loss(model: &Model, images: &Tensor, labels: &[usize]) -> Result<f32> {
    check_labels(images, labels, model.num_classes())?;
    let emb = embed_all(model, images)?;
    let logits = model.classify(&emb)?;
    let mut g = Graph::inference();
    let l = g.constant(logits);
    let ce = g.cross_entropy(l, labels)?;
    g.value(ce).item()
}
