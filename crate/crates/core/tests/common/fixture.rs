//! Trained models shared by the tests of one binary.

use std::sync::OnceLock;

use cfdr::detector::{build_reference, ReferenceProfile};
use cfdr::harness::experiment::{prepare_workspace, recovery_config, train_clean, Workspace};
use cfdr::harness::ExperimentConfig;
use cfdr::model::Model;
use cfdr::recovery::RecoveryConfig;

pub struct Fixture {
    pub cfg: ExperimentConfig,
    pub ws: Workspace,
    pub model: Model,
    pub profile: ReferenceProfile,
    pub clean_acc: f32,
    pub clean_ce: f32,
}

impl Fixture {
    pub fn build(cfg: ExperimentConfig, profile_samples: usize) -> Fixture {
        let ws = prepare_workspace(&cfg).unwrap();
        let trained = train_clean(&cfg, &ws).unwrap();
        let profile = build_reference(&trained.model, &ws.detect, profile_samples, &cfg.detect.detector).unwrap();
        let clean_acc = trained.model.accuracy_on(&ws.eval).unwrap();
        Fixture {
            clean_ce: trained.log_b.last_loss().unwrap(),
            model: trained.model,
            cfg,
            ws,
            profile,
            clean_acc,
        }
    }

    pub fn recovery(&self, labeled: bool) -> RecoveryConfig {
        recovery_config(&self.cfg, &self.profile, self.clean_ce, labeled)
    }
}

/// 1000 blob images, 10 contrastive epochs.
pub fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default().with_seed(seed);
    cfg.data.train_subset = 1000;
    cfg.train.phase_a.epochs = 10;
    cfg
}

pub fn small() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| Fixture::build(small_config(7), 100))
}
