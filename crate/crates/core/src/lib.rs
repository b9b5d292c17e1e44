//! Adversarial contrastive pretraining of norm-constrained ReLU encoders,
//! few-shot downstream evaluation, and the certificate quantities that bound
//! transfer error.

pub mod act;
pub mod augmentation;
pub mod autodiff;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod diagnostics;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod linalg;
pub mod synthgen;

pub use error::{ActError, Result};
