//! Repairing a tampered model by contrastive retraining, optionally followed
//! by classifier fine-tuning when labels are available.

use serde::{Deserialize, Serialize};

use crate::contrastive::{
    check_labels, classifier_epoch, contrastive_epoch, embed_all, PhaseAConfig, PhaseBConfig,
    DEFAULT_BATCH,
};
use crate::detector::{detect, DetectionVerdict, DetectorConfig, ReferenceProfile};
use crate::error::{CfdrError, Result};
use crate::harness::data::Dataset;
use crate::model::{LabeledBatch, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    ReferenceReached,
    Plateau,
    EpochCap,
}

/// Clean-model loss levels a recovering model is compared against; `None`
/// disables the reference stop for that phase.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReferenceLosses {
    pub contrastive: Option<f32>,
    /// Added to `contrastive` before comparing (batch-to-batch noise).
    pub contrastive_tolerance: f32,
    pub cross_entropy: Option<f32>,
    pub cross_entropy_tolerance: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoveryConfig {
    pub labeled: bool,
    pub data_budget: usize,
    pub batch: usize,
    /// Epoch limit, applied to each phase separately.
    pub epoch_cap: usize,
    pub patience: usize,
    pub min_rel_improve: f32,
    pub reference: ReferenceLosses,
    /// Phase (a) settings; `epochs` is ignored. The default keeps the
    /// projection head fixed so the encoder is pulled back toward features
    /// the clean head expects, and warms the learning rate up over 8 steps.
    pub phase_a: PhaseAConfig,
    /// Phase (b) settings; `epochs` is ignored.
    pub phase_b: PhaseBConfig,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        let mut phase_a = PhaseAConfig {
            freeze_head: true,
            ..PhaseAConfig::default()
        };
        // Adam restarts from zero moments; ramp over one epoch of 512 / 64.
        phase_a.optimizer.warmup_steps = 8;
        RecoveryConfig {
            labeled: false,
            data_budget: 512,
            batch: DEFAULT_BATCH,
            epoch_cap: 30,
            patience: 3,
            min_rel_improve: 1e-3,
            reference: ReferenceLosses::default(),
            phase_a,
            phase_b: PhaseBConfig::default(),
        }
    }
}

impl RecoveryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epoch_cap == 0 {
            return Err(CfdrError::InvalidConfig("epoch_cap must be at least 1".into()));
        }
        if self.batch < 2 {
            return Err(CfdrError::InvalidConfig("recovery batch must be at least 2".into()));
        }
        if self.data_budget < self.batch {
            return Err(CfdrError::InvalidConfig(format!(
                "data_budget {} is smaller than one batch of {}",
                self.data_budget, self.batch
            )));
        }
        if self.patience == 0 {
            return Err(CfdrError::InvalidConfig("patience must be at least 1".into()));
        }
        self.phase_a.augment.validate()?;
        self.phase_a.loss.validate()
    }
}

/// Stopping rule after the epoch ending at `losses.last()`: the loss reached
/// `reference`, it improved by less than `min_rel_improve` (relative) for
/// `patience` consecutive epochs, or `cap` epochs have run; checked in that
/// order.
pub fn stop_check(losses: &[f32], reference: f32, patience: usize, min_rel_improve: f32, cap: usize) -> Option<StopReason> {
    let &last = losses.last()?;
    if last <= reference {
        return Some(StopReason::ReferenceReached);
    }
    if losses.len() > patience {
        let stalled = losses
            .windows(2)
            .rev()
            .take(patience)
            .all(|w| (w[0] - w[1]) < min_rel_improve * w[0].abs());
        if stalled {
            return Some(StopReason::Plateau);
        }
    }
    if losses.len() >= cap {
        return Some(StopReason::EpochCap);
    }
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseRun {
    pub epochs: usize,
    pub stop_reason: StopReason,
    pub losses: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub acc_before: Option<f32>,
    pub acc_after: Option<f32>,
    /// Accuracy between the phases of a labeled run.
    pub acc_after_phase_a: Option<f32>,
    /// Sum over both phases.
    pub epochs_used: usize,
    /// Reason the last phase stopped.
    pub stop_reason: StopReason,
    pub phase_b_run: bool,
    pub phase_a: PhaseRun,
    pub phase_b: Option<PhaseRun>,
}

impl RecoveryReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-epoch losses as `phase,epoch,mean_loss` CSV.
    pub fn epochs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["phase", "epoch", "mean_loss"])?;
        let runs = std::iter::once(("a", &self.phase_a)).chain(self.phase_b.iter().map(|r| ("b", r)));
        for (phase, run) in runs {
            for (e, l) in run.losses.iter().enumerate() {
                w.write_record([phase.to_string(), e.to_string(), l.to_string()])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| CfdrError::Data(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

fn run_phase(
    cfg: &RecoveryConfig,
    reference: f32,
    mut epoch: impl FnMut(usize) -> Result<f32>,
) -> Result<PhaseRun> {
    let mut losses = Vec::new();
    loop {
        let l = epoch(losses.len())?;
        losses.push(l);
        if let Some(stop_reason) = stop_check(&losses, reference, cfg.patience, cfg.min_rel_improve, cfg.epoch_cap) {
            return Ok(PhaseRun {
                epochs: losses.len(),
                stop_reason,
                losses,
            });
        }
    }
}

/// Retrains `model` in place on at most `cfg.data_budget` images of `data`.
///
/// Phase (a) always runs on the images alone; when `cfg.labeled` is set the
/// classifier is then fine-tuned on the same images and their labels.
/// Quantized layers are released for float training and re-quantized
/// afterwards. `eval`, when given, measures accuracy before and after.
pub fn recover(model: &mut Model, data: &Dataset, cfg: &RecoveryConfig, eval: Option<&LabeledBatch>) -> Result<RecoveryReport> {
    cfg.validate()?;
    if data.len() < cfg.batch {
        return Err(CfdrError::InvalidInput(format!(
            "recovery data holds {} images, fewer than one batch of {}",
            data.len(),
            cfg.batch
        )));
    }
    let budget = cfg.data_budget.min(data.len());
    let data = data.range(0, budget)?;
    let labels = if cfg.labeled {
        let l = data
            .labels_usize()
            .ok_or_else(|| CfdrError::InvalidInput("labeled recovery requested but the data has no labels".into()))?;
        Some(l)
    } else {
        None
    };
    let images: Tensor = data.unlabeled().to_tensor()?;
    if let Some(l) = &labels {
        check_labels(&images, l, model.num_classes())?;
    }

    let acc = |m: &Model| eval.map(|e| m.accuracy_on(e)).transpose();
    let acc_before = acc(model)?;
    let quantized = model.dequantize_all();
    model.reset_optimizer_state();

    let phase_a_cfg = PhaseAConfig {
        batch_size: cfg.batch,
        ..cfg.phase_a.clone()
    };
    let ref_a = cfg.reference.contrastive.map_or(f32::NEG_INFINITY, |c| c + cfg.reference.contrastive_tolerance);
    let phase_a = run_phase(cfg, ref_a, |e| contrastive_epoch(model, &images, &phase_a_cfg, e))?;
    log::info!("recovery phase a: {} epochs, {:?}", phase_a.epochs, phase_a.stop_reason);

    let mut acc_after_phase_a = None;
    let mut phase_b = None;
    if let Some(labels) = &labels {
        acc_after_phase_a = acc(model)?;
        let phase_b_cfg = PhaseBConfig {
            batch_size: cfg.batch,
            ..cfg.phase_b.clone()
        };
        let emb = embed_all(model, &images)?;
        let ref_b = cfg.reference.cross_entropy.map_or(f32::NEG_INFINITY, |c| c + cfg.reference.cross_entropy_tolerance);
        let run = run_phase(cfg, ref_b, |e| classifier_epoch(model, &emb, labels, &phase_b_cfg, e))?;
        log::info!("recovery phase b: {} epochs, {:?}", run.epochs, run.stop_reason);
        phase_b = Some(run);
    }

    model.reset_optimizer_state();
    for layer in &quantized {
        model.quantize_layer(layer)?;
    }
    model.metadata.phase = if phase_b.is_some() { "recovered_labeled" } else { "recovered_unlabeled" }.into();
    let last = phase_b.as_ref().unwrap_or(&phase_a);
    Ok(RecoveryReport {
        acc_before,
        acc_after: acc(model)?,
        acc_after_phase_a,
        epochs_used: phase_a.epochs + phase_b.as_ref().map_or(0, |r| r.epochs),
        stop_reason: last.stop_reason,
        phase_b_run: phase_b.is_some(),
        phase_a,
        phase_b,
    })
}

/// Runs detection and, only if the model is flagged, recovery on a copy.
#[allow(clippy::too_many_arguments)]
pub fn detect_and_recover(
    model: &Model,
    detect_images: &Tensor,
    recover_data: &Dataset,
    profile: &ReferenceProfile,
    detector: &DetectorConfig,
    delta: f32,
    cfg: &RecoveryConfig,
    eval: Option<&LabeledBatch>,
) -> Result<(DetectionVerdict, Option<(Model, RecoveryReport)>)> {
    let verdict = detect(profile, model, detect_images, detector, delta, 1, 0)?;
    if !verdict.attacked {
        return Ok((verdict, None));
    }
    let mut repaired = model.clone();
    let report = recover(&mut repaired, recover_data, cfg, eval)?;
    Ok((verdict, Some((repaired, report))))
}
