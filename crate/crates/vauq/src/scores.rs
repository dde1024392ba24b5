//! Length-normalized entropy, the image-information score under each masking
//! condition, and the combined vision-aware uncertainty score.
//!
//! Every score in this crate shares one orientation: higher means more
//! likely hallucinated. The image-information score itself keeps its natural
//! sign (higher = stronger visual grounding, and it may legitimately be
//! negative when masking reduces entropy); report-level negation happens in
//! the pipeline, never here, so the linear combination below stays faithful.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backend::{MaskKind, StepStats};
use crate::error::{Error, Result};

/// Arithmetic mean of per-step entropies: the length-normalized entropy of
/// the response under whichever condition produced the steps.
pub fn mean_entropy(steps: &[StepStats]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::EmptySteps);
    }
    Ok(steps.iter().map(|s| s.entropy).sum::<f64>() / steps.len() as f64)
}

/// How a blank condition was produced by the backend.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlankMode {
    /// Attention knockout of all visual tokens; positional layout unchanged.
    Knockout,
    /// True image removal by an adapter that supports it.
    Removal,
}

/// Length-normalized entropies of one fixed response under the full
/// condition and under degraded conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionEntropies {
    pub h_full: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h_blank: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub h_masked: BTreeMap<MaskKind, f64>,
    /// Which blank semantics ran, recorded whenever `h_blank` is present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blank_mode: Option<BlankMode>,
}

impl ConditionEntropies {
    pub fn new(h_full: f64) -> Self {
        Self {
            h_full,
            h_blank: None,
            h_masked: BTreeMap::new(),
            blank_mode: None,
        }
    }

    pub fn with_blank(mut self, h_blank: f64, mode: BlankMode) -> Self {
        self.h_blank = Some(h_blank);
        self.blank_mode = Some(mode);
        self
    }

    pub fn with_masked(mut self, kind: MaskKind, h: f64) -> Self {
        self.h_masked.insert(kind, h);
        self
    }

    /// Entropy under the requested degraded condition.
    pub fn degraded(&self, kind: MaskKind) -> Result<f64> {
        match kind {
            MaskKind::Blank => self.h_blank.ok_or(Error::MissingConditionEntropy(kind)),
            other => self
                .h_masked
                .get(&other)
                .copied()
                .ok_or(Error::MissingConditionEntropy(other)),
        }
    }
}

/// Image-information score for one degraded condition: entropy under the
/// degradation minus entropy under the full image, on the same fixed
/// response. Negative values are kept; clamping would silently reorder the
/// combined score.
pub fn image_information_score(ce: &ConditionEntropies, condition: MaskKind) -> Result<f64> {
    Ok(ce.degraded(condition)? - ce.h_full)
}

/// Hyperparameters of the combined score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VauqParams {
    /// Non-negative weight on the image-information term.
    pub alpha: f64,
    /// Percentage of visual tokens selected into the core mask.
    pub k_percent: u32,
    /// Inclusive attention-layer band for saliency aggregation. Family
    /// defaults are documented per backend; this field is always explicit.
    pub layer_band: (usize, usize),
}

impl Default for VauqParams {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            k_percent: 60,
            layer_band: (10, 25),
        }
    }
}

impl VauqParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "alpha {} must be finite and non-negative",
                self.alpha
            )));
        }
        if self.k_percent > 100 {
            return Err(Error::InvalidConfig(format!(
                "k_percent {} outside 0..=100",
                self.k_percent
            )));
        }
        if self.layer_band.0 > self.layer_band.1 {
            return Err(Error::InvalidConfig(format!(
                "layer band ({}, {}) is inverted",
                self.layer_band.0, self.layer_band.1
            )));
        }
        Ok(())
    }
}

/// The combined score `h_full - alpha * IS` for an arbitrary masking
/// variant. Higher means more likely hallucinated.
pub fn vauq_score_with(ce: &ConditionEntropies, alpha: f64, condition: MaskKind) -> Result<f64> {
    Ok(ce.h_full - alpha * image_information_score(ce, condition)?)
}

/// The combined score with the core mask, `h_full - alpha * IS_core`.
pub fn vauq_score(ce: &ConditionEntropies, params: &VauqParams) -> Result<f64> {
    vauq_score_with(ce, params.alpha, MaskKind::Core)
}

/// The algebraically expanded form
/// `(1 + alpha) * h_full - alpha * h_masked[core]`; agrees with
/// [`vauq_score`] to floating-point round-off and exists so the two routes
/// can be checked against each other.
pub fn vauq_score_expanded(ce: &ConditionEntropies, params: &VauqParams) -> Result<f64> {
    let h_masked = ce.degraded(MaskKind::Core)?;
    Ok((1.0 + params.alpha) * ce.h_full - params.alpha * h_masked)
}

/// Binary self-evaluation outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Hallucinated,
    Correct,
}

/// Thresholded decision: hallucinated iff `score >= tau`. The boundary is
/// included, and `tau = -inf` flags everything.
pub fn threshold_decision(score: f64, tau: f64) -> Decision {
    if score >= tau {
        Decision::Hallucinated
    } else {
        Decision::Correct
    }
}
