//! Attention pruning for small transformer models.
//!
//! The crate trains desk-scale transformer language and seq2seq models,
//! averages their attention patterns over a dataset, derives global
//! percentile-based prune masks, retrains under those masks, and reports
//! quality alongside the multiply-accumulate savings the masks imply.
//!
//! Pipeline in one pass: train a baseline ([`train::train`]), collect
//! per-head average attention ([`pipeline::AttentionStats`]), build a
//! [`pipeline::MaskSet`] at a prune percentage ([`pipeline::build_masks`]),
//! retrain with the masks injected into every attention call, and compare
//! metrics ([`train::run_ap`]).

pub mod attention;
pub mod cost;
pub mod data;
pub mod error;
pub mod model;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
