//! Multidimensional preference optimization for autoregressive token models.
//!
//! The crate covers the whole desk-scale pipeline: a small reverse-mode
//! autodiff engine, a decoder-only token model, a synthetic text-to-token
//! world with three evaluation dimensions, preference-set construction, the
//! DPO and cross-entropy-regularized objectives, and the training harness.

pub mod autodiff;
pub mod error;
pub mod lm;
pub mod metrics;
pub mod objectives;
pub mod par;
pub mod prefset;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
