//! Auditing how much a finetuned classifier leaks about its pretraining data.
//!
//! The pipeline trains an ensemble of shadow models (each pretrained on a
//! random half of a population pool and finetuned on a downstream task),
//! then scores every challenge point against every rotated target with the
//! adapted likelihood-ratio attack, a likelihood-ratio attack on the
//! pretrained model, and metaclassifier attacks on logit-scaled prediction
//! vectors. Scores are summarized with ROC, AUC, balanced accuracy and TPR
//! at fixed FPR.

pub mod attacks;
pub mod datasets;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod par;
pub mod rng;
pub mod shadow;
pub mod training;

pub use error::{Error, Result};
