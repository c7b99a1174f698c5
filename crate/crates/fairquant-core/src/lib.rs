//! Fairness-aware mixed-precision weight quantization.
//!
//! The crate provides a small deterministic training runtime (tensors,
//! dense/conv layers, reverse-mode gradients, AdamW), symmetric uniform fake
//! quantization over per-tensor or per-channel scopes, group-conditioned
//! importance calibration, budgeted bit allocation, fixed mixed-precision
//! quantization-aware training, learnable bit-width training, group fairness
//! metrics, and synthetic grouped datasets to exercise the pipeline.

pub mod error;
pub mod net;
pub mod optim;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
pub use net::{ArchLayer, Layer, Network};
pub use quant::{Granularity, QuantPlan, Scope};
pub use tensor::Tensor;
