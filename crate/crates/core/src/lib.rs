//! Contrastive-learning based fault-injection detection and recovery.
//!
//! The crate trains a small convolutional classifier in two phases
//! (contrastive pretraining of encoder and projection head, then cross-entropy
//! fine-tuning of the FC classifier), simulates parameter-tampering attacks
//! against it, flags tampering by watching the single-batch contrastive loss,
//! and repairs flagged models by retraining on a few hundred images.

pub mod attacks;
pub mod contrastive;
pub mod detector;
pub mod error;
pub mod harness;
pub mod model;
pub mod recovery;
pub mod rng;
pub mod tensor;

pub use error::{CfdrError, Result};
