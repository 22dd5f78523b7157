//! Experiment configuration (one JSON document).

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::attacks::{FsaNorm, PbsConfig};
use crate::contrastive::{PhaseAConfig, PhaseBConfig};
use crate::detector::DetectorConfig;
use crate::error::{CfdrError, Result};
use crate::harness::data::Split;
use crate::model::ModelConfig;
use crate::recovery::RecoveryConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataSource {
    Cifar10,
    SyntheticBlobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory with the CIFAR-10 binary batches.
    pub data_dir: Option<PathBuf>,
    /// Training images used (a seeded subset for CIFAR-10).
    pub train_subset: usize,
    /// Size of the synthetic test pool; CIFAR-10 uses its test batch.
    pub synthetic_test: usize,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::SyntheticBlobs,
            data_dir: None,
            train_subset: 2000,
            synthetic_test: 2000,
            classes: 10,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub phase_a: PhaseAConfig,
    pub phase_b: PhaseBConfig,
}

impl TrainConfig {
    /// The 1000 / 100 epoch schedule.
    pub fn full_schedule() -> Self {
        TrainConfig {
            phase_a: PhaseAConfig::full_schedule(),
            phase_b: PhaseBConfig::full_schedule(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PbsPlan {
    pub enabled: bool,
    /// Layers given an int8 view and searched.
    pub layers: Vec<String>,
    /// Labeled training images the attacker probes.
    pub attack_batch: usize,
    #[serde(flatten)]
    pub config: PbsConfig,
}

impl Default for PbsPlan {
    fn default() -> Self {
        PbsPlan {
            enabled: true,
            layers: vec!["encoder.conv1".into(), "encoder.conv2".into(), "encoder.conv3".into()],
            attack_batch: 128,
            config: PbsConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsaPlan {
    pub layer: String,
    pub norm: FsaNorm,
    pub s: usize,
    pub r: usize,
    pub penalty: f32,
    pub max_iters: usize,
}

impl Default for FsaPlan {
    fn default() -> Self {
        FsaPlan {
            layer: "classifier".into(),
            norm: FsaNorm::L2,
            s: 5,
            r: 20,
            penalty: 1e-3,
            max_iters: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GdaPlan {
    pub layer: String,
    pub target_class: usize,
    pub sources: usize,
    pub lr: f32,
    pub l2_coef: f32,
    pub max_iters: usize,
}

impl Default for GdaPlan {
    fn default() -> Self {
        GdaPlan {
            layer: "encoder.conv2".into(),
            target_class: 0,
            sources: 64,
            lr: 1e-2,
            l2_coef: 1e-3,
            max_iters: 500,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomPlan {
    pub layer: String,
    pub n_bits: usize,
    pub msb_only: bool,
}

impl Default for RandomPlan {
    fn default() -> Self {
        RandomPlan {
            layer: "encoder.conv1".into(),
            n_bits: 64,
            msb_only: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackPlan {
    pub pbs: PbsPlan,
    pub fsa: Vec<FsaPlan>,
    pub gda: Vec<GdaPlan>,
    pub random: Vec<RandomPlan>,
}

impl Default for AttackPlan {
    fn default() -> Self {
        AttackPlan {
            pbs: PbsPlan::default(),
            fsa: vec![
                FsaPlan::default(),
                FsaPlan {
                    norm: FsaNorm::L0,
                    ..Default::default()
                },
                FsaPlan {
                    norm: FsaNorm::L0,
                    layer: "encoder.conv3".into(),
                    ..Default::default()
                },
            ],
            gda: vec![GdaPlan::default()],
            random: vec![RandomPlan::default()],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectPlan {
    #[serde(flatten)]
    pub detector: DetectorConfig,
    /// Batches sampled for the reference profile and per model for the
    /// detection CSV.
    pub n_samples: usize,
    /// Images reserved for detection.
    pub data_size: usize,
    /// Tolerance; `None` uses the profile's default.
    pub delta: Option<f32>,
}

impl Default for DetectPlan {
    fn default() -> Self {
        DetectPlan {
            detector: DetectorConfig::default(),
            n_samples: 1000,
            data_size: 512,
            delta: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecoverPlan {
    #[serde(flatten)]
    pub config: RecoveryConfig,
    /// Split the recovery images come from.
    pub split: Split,
    /// Run both the unlabeled and the labeled variant for every attack.
    pub run_labeled: bool,
}

impl Default for RecoverPlan {
    fn default() -> Self {
        RecoverPlan {
            config: RecoveryConfig::default(),
            split: Split::Test,
            run_labeled: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub attack: AttackPlan,
    pub detect: DetectPlan,
    pub recover: RecoverPlan,
    /// Held-out test images used for every accuracy figure.
    pub eval_size: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            attack: AttackPlan::default(),
            detect: DetectPlan::default(),
            recover: RecoverPlan::default(),
            eval_size: 500,
            output_dir: PathBuf::from("out"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Copies the root seed into every stage so one number drives the run.
    /// Each stage still draws from its own named substreams.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.sync_seeds();
        self
    }

    pub fn sync_seeds(&mut self) {
        let s = self.seed;
        self.model.seed = crate::rng::derive_seed(s, "init", 0);
        self.train.phase_a.seed = s;
        self.train.phase_a.augment.seed = crate::rng::derive_seed(s, "augment", 0);
        self.train.phase_b.seed = s;
        self.detect.detector.seed = crate::rng::derive_seed(s, "detect", 0);
        self.recover.config.phase_a.seed = crate::rng::derive_seed(s, "recover", 0);
        self.recover.config.phase_a.augment.seed = crate::rng::derive_seed(s, "recover-augment", 0);
        self.recover.config.phase_b.seed = crate::rng::derive_seed(s, "recover", 1);
    }

    /// Test images needed by the evaluation, detection, recovery and attack
    /// subsets, which are carved out of the test pool without overlap.
    pub fn test_pool_needed(&self) -> usize {
        let fsa_r = self.attack.fsa.iter().map(|f| f.r).max().unwrap_or(0);
        let gda = self.attack.gda.iter().map(|g| g.sources).max().unwrap_or(0);
        let recover = match self.recover.split {
            Split::Test => self.recover.config.data_budget,
            Split::Train => 0,
        };
        self.eval_size + self.detect.data_size + recover + fsa_r + gda
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.phase_a.augment.validate()?;
        self.train.phase_a.loss.validate()?;
        self.detect.detector.validate()?;
        self.recover.config.validate()?;
        if self.eval_size == 0 {
            return Err(CfdrError::InvalidConfig("eval_size must be positive".into()));
        }
        if self.data.classes != self.model.num_classes {
            return Err(CfdrError::InvalidConfig(format!(
                "data has {} classes but the model predicts {}",
                self.data.classes, self.model.num_classes
            )));
        }
        if self.detect.data_size < self.detect.detector.batch_size {
            return Err(CfdrError::InvalidConfig("detection data must hold at least one batch".into()));
        }
        if self.detect.n_samples == 0 {
            return Err(CfdrError::InvalidConfig("detect.n_samples must be positive".into()));
        }
        if let Some(d) = self.detect.delta {
            if !(d > 0.0) {
                return Err(CfdrError::InvalidConfig(format!("delta must be positive, got {d}")));
            }
        }
        for f in &self.attack.fsa {
            if f.s > f.r {
                return Err(CfdrError::InvalidConfig(format!("FSA S={} exceeds R={}", f.s, f.r)));
            }
        }
        for g in &self.attack.gda {
            if g.target_class >= self.model.num_classes {
                return Err(CfdrError::InvalidConfig(format!("GDA target class {} out of range", g.target_class)));
            }
        }
        if self.attack.pbs.enabled && self.attack.pbs.layers.is_empty() {
            return Err(CfdrError::InvalidConfig("PBS needs at least one layer to quantize".into()));
        }
        if self.recover.split == Split::Train && self.recover.config.data_budget > self.data.train_subset {
            return Err(CfdrError::InvalidConfig("recovery budget exceeds the training subset".into()));
        }
        Ok(())
    }
}
