//! Positive-pair augmentation, the contrastive loss, and the two training phases.

mod augment;
mod loss;
mod train;

pub use augment::{augment_pair, AugmentationConfig, ContrastiveBatch};
pub use loss::{contrastive_loss, contrastive_loss_on, cosine_sim, LossConfig, LossVariant, Reduction};
pub use train::{
    classifier_loss, embed_all, train_phase_a, train_phase_b, EpochStat, OptimizerConfig, PhaseAConfig,
    PhaseBConfig, TrainLog, DEFAULT_BATCH,
};
pub(crate) use train::{check_labels, classifier_epoch, contrastive_epoch};
