//! Dual-stream multimodal fMRI drug-response prediction.
//!
//! Pipeline: synthetic cohort generation -> time-series / functional-
//! connectivity preprocessing -> frozen pre-trainable transformer TS encoder
//! plus residual-CNN FC encoder with feature fusion -> cross-validation
//! harness with F1/BACC/AUROC/MCC -> integrated-gradients interpretation.

pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod interpret;
pub mod model;
pub mod numerics;
pub mod preprocess;
pub mod pretrain;

pub use error::{Error, Result};
