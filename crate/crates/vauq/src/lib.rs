//! Training-free scoring of how much a multimodal autoregressive model's
//! answer depends on visual evidence, plus the baseline self-evaluation
//! scores and an evaluation harness (AUROC, sweeps, transfer, timing) over
//! labeled response datasets.
//!
//! The central quantity is the image-information score: the rise in
//! length-normalized predictive entropy when the visual evidence a response
//! leaned on is knocked out, measured on the same fixed response. Combining
//! predictive entropy with the core-masked variant of that score gives the
//! vision-aware uncertainty score `h_full - alpha * IS_core`, oriented so
//! higher means more likely hallucinated.
//!
//! Modules:
//! - [`backend`]: the model contract (generate, teacher-forced rescore under
//!   attention knockout, attention/hidden export), the deterministic toy
//!   backend, and the on-disk trace cache.
//! - [`saliency`]: attention aggregation over a layer band, top-K% patch
//!   selection, masking variants, evidence-region diagnostics.
//! - [`scores`]: entropy, image-information and combined scores.
//! - [`baselines`]: the eight comparison scores under one orientation.
//! - [`pipeline`]: per-sample orchestration and caching.
//! - [`eval`]: datasets, judge-label ingestion, AUROC, sweeps, transfer,
//!   timing.
//! - [`synthetic`]: labeled toy populations for desk-scale evaluation.

pub mod backend;
pub mod baselines;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod report;
pub mod saliency;
pub mod scores;
pub mod synthetic;

pub use error::{Error, Result};
