//! Multi-level knowledge distillation for noise-robust speech emotion
//! recognition.
//!
//! A teacher (strided conv feature encoder + transformer context network +
//! linear head) is trained on clean audio. A student with half as many
//! transformer blocks is initialized from the teacher's even-numbered blocks
//! and trained on noise-contaminated audio against three signals: the
//! teacher's intermediate hidden states (MSE), the teacher's
//! temperature-softened class distribution (KL), and the ground-truth label
//! (cross-entropy).

pub mod audio;
pub mod checks;
pub mod distill;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
