//! Backend contract for scored models: generation, teacher-forced rescoring
//! under visual-token knockout, and attention / hidden-state export.
//!
//! A backend owns the model. Everything downstream (saliency, scoring,
//! evaluation) only sees [`GenerationTrace`]s, so any model that can export
//! per-step predictive statistics and generated-to-visual attention can be
//! plugged in behind the [`Backend`] trait. [`ToyBackend`] is a deterministic
//! closed-form implementation used for desk-scale oracle testing.

mod cache;
mod toy;

pub use cache::{decode_trace, encode_trace, TraceCache};
pub use toy::{ToyBackend, ToyConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Per-step statistics
// ---------------------------------------------------------------------------

/// Predictive statistics for one generation step, in nats.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    /// Full-vocabulary Shannon entropy of the next-token distribution.
    pub entropy: f64,
    /// Log-probability of the token actually realized at this step.
    pub logprob_realized: f64,
}

impl StepStats {
    /// Checks `0 <= entropy <= ln(vocab_size)` and `logprob_realized <= 0`,
    /// with a small tolerance for floating-point round-off.
    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let max_entropy = (vocab_size as f64).ln();
        if !self.entropy.is_finite() || self.entropy < -1e-12 || self.entropy > max_entropy + 1e-9 {
            return Err(Error::InvalidTrace(format!(
                "step entropy {} outside [0, ln {vocab_size}]",
                self.entropy
            )));
        }
        if !self.logprob_realized.is_finite() && self.logprob_realized != f64::NEG_INFINITY {
            return Err(Error::InvalidTrace(format!(
                "non-finite realized log-probability {}",
                self.logprob_realized
            )));
        }
        if self.logprob_realized > 1e-12 {
            return Err(Error::InvalidTrace(format!(
                "positive realized log-probability {}",
                self.logprob_realized
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Visual layout and masks
// ---------------------------------------------------------------------------

/// Axis-aligned box in normalized image coordinates, `0 <= x0 < x1 <= 1` and
/// `0 <= y0 < y1 <= 1`. Serialized as `[x0, y0, x1, y1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        let ok = (0.0..1.0).contains(&x0)
            && (0.0..1.0).contains(&y0)
            && x0 < x1
            && y0 < y1
            && x1 <= 1.0
            && y1 <= 1.0
            && [x0, y0, x1, y1].iter().all(|v| v.is_finite());
        if !ok {
            return Err(Error::InvalidConfig(format!(
                "bounding box [{x0}, {y0}, {x1}, {y1}] violates 0 <= min < max <= 1"
            )));
        }
        Ok(Self { x0, y0, x1, y1 })
    }

    /// Inclusive containment test for a point in normalized coordinates.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.x0 <= x && x <= self.x1 && self.y0 <= y && y <= self.y1
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl TryFrom<[f64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

/// Patch-grid geometry of the visual token sequence, with optional
/// ground-truth evidence regions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualLayout {
    pub n_tokens: usize,
    /// `(rows, cols)` with `rows * cols == n_tokens`. Patch `i` sits at
    /// row `i / cols`, column `i % cols`.
    pub grid: (usize, usize),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_regions: Option<Vec<BoundingBox>>,
}

impl VisualLayout {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch grid ({rows}, {cols}) must be non-empty"
            )));
        }
        Ok(Self {
            n_tokens: rows * cols,
            grid: (rows, cols),
            evidence_regions: None,
        })
    }

    pub fn with_evidence(mut self, regions: Vec<BoundingBox>) -> Self {
        self.evidence_regions = Some(regions);
        self
    }

    /// Center of patch `idx` in normalized image coordinates `(x, y)`.
    pub fn patch_center(&self, idx: usize) -> (f64, f64) {
        let (rows, cols) = self.grid;
        let r = idx / cols;
        let c = idx % cols;
        (
            (c as f64 + 0.5) / cols as f64,
            (r as f64 + 0.5) / rows as f64,
        )
    }

    /// Indices of patches whose center point lies inside any of `boxes`.
    pub fn patches_in_boxes(&self, boxes: &[BoundingBox]) -> Vec<usize> {
        (0..self.n_tokens)
            .filter(|&i| {
                let (x, y) = self.patch_center(i);
                boxes.iter().any(|b| b.contains(x, y))
            })
            .collect()
    }
}

/// Provenance of a knockout mask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    Core,
    Random,
    GroundTruth,
    Blank,
    None,
}

impl fmt::Display for MaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            MaskKind::Core => "core",
            MaskKind::Random => "random",
            MaskKind::GroundTruth => "ground_truth",
            MaskKind::Blank => "blank",
            MaskKind::None => "none",
        };
        f.write_str(s)
    }
}

/// A named subset of visual token indices to knock out.
///
/// Invariants are normalized at construction: indices are sorted and unique,
/// all below `n_tokens`; an empty selection is `kind = none` and a full
/// selection is `kind = blank`, regardless of the kind requested.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    pub indices: Vec<usize>,
    pub n_tokens: usize,
}

impl MaskSpec {
    pub fn new(kind: MaskKind, mut indices: Vec<usize>, n_tokens: usize) -> Result<Self> {
        indices.sort_unstable();
        indices.dedup();
        if let Some(&max) = indices.last() {
            if max >= n_tokens {
                return Err(Error::MaskIndexOutOfRange {
                    index: max,
                    n_tokens,
                });
            }
        }
        let kind = if indices.is_empty() {
            MaskKind::None
        } else if indices.len() == n_tokens {
            MaskKind::Blank
        } else {
            match kind {
                MaskKind::None | MaskKind::Blank => {
                    return Err(Error::InvalidMask(format!(
                        "kind {kind} requires {} selected indices, got {}",
                        if kind == MaskKind::None { 0 } else { n_tokens },
                        indices.len()
                    )));
                }
                k => k,
            }
        };
        Ok(Self {
            kind,
            indices,
            n_tokens,
        })
    }

    /// The identity mask: nothing knocked out.
    pub fn none(n_tokens: usize) -> Self {
        Self {
            kind: MaskKind::None,
            indices: Vec::new(),
            n_tokens,
        }
    }

    /// Knocks out every visual token.
    pub fn blank(n_tokens: usize) -> Self {
        Self {
            kind: MaskKind::Blank,
            indices: (0..n_tokens).collect(),
            n_tokens,
        }
    }

    pub fn cardinality(&self) -> usize {
        self.indices.len()
    }

    pub fn is_masked(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

// ---------------------------------------------------------------------------
// Trace tensors
// ---------------------------------------------------------------------------

/// Generated-to-visual attention, stored flat in `[layer][head][query][key]`
/// order as 32-bit floats. Each entry is the attention weight from generated
/// token `query` to visual token `key`; the sum over keys of one row is the
/// visual share of that row's (stochastic) attention mass, so it never
/// exceeds 1.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensor {
    n_layers: usize,
    n_heads: usize,
    n_queries: usize,
    n_keys: usize,
    data: Vec<f32>,
}

impl AttentionTensor {
    pub fn zeros(n_layers: usize, n_heads: usize, n_queries: usize, n_keys: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            n_queries,
            n_keys,
            data: vec![0.0; n_layers * n_heads * n_queries * n_keys],
        }
    }

    pub fn from_flat(
        n_layers: usize,
        n_heads: usize,
        n_queries: usize,
        n_keys: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = n_layers * n_heads * n_queries * n_keys;
        if data.len() != expected {
            return Err(Error::InvalidTrace(format!(
                "attention buffer has {} entries, expected {expected}",
                data.len()
            )));
        }
        Ok(Self {
            n_layers,
            n_heads,
            n_queries,
            n_keys,
            data,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_keys(&self) -> usize {
        self.n_keys
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    fn offset(&self, layer: usize, head: usize, query: usize) -> usize {
        ((layer * self.n_heads + head) * self.n_queries + query) * self.n_keys
    }

    pub fn get(&self, layer: usize, head: usize, query: usize, key: usize) -> f32 {
        self.data[self.offset(layer, head, query) + key]
    }

    /// The visual sub-row for one `(layer, head, query)` triple.
    pub fn visual_row(&self, layer: usize, head: usize, query: usize) -> &[f32] {
        let start = self.offset(layer, head, query);
        &self.data[start..start + self.n_keys]
    }

    pub fn visual_row_mut(&mut self, layer: usize, head: usize, query: usize) -> &mut [f32] {
        let start = self.offset(layer, head, query);
        &mut self.data[start..start + self.n_keys]
    }

    /// Every entry in `[0, 1]` and every visual sub-row mass at most 1.
    pub fn validate(&self) -> Result<()> {
        for l in 0..self.n_layers {
            for h in 0..self.n_heads {
                for q in 0..self.n_queries {
                    let row = self.visual_row(l, h, q);
                    let mut sum = 0.0f64;
                    for &v in row {
                        if !v.is_finite() || !(-1e-6..=1.0 + 1e-6).contains(&(v as f64)) {
                            return Err(Error::InvalidTrace(format!(
                                "attention entry {v} at ({l},{h},{q}) outside [0, 1]"
                            )));
                        }
                        sum += v as f64;
                    }
                    if sum > 1.0 + 1e-5 {
                        return Err(Error::InvalidTrace(format!(
                            "visual attention mass {sum} at ({l},{h},{q}) exceeds 1"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Activations exported at one embedding point: rows for generated-token
/// positions and rows for visual-token positions, both `[position][dim]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerHidden {
    pub generated: Vec<f32>,
    pub visual: Vec<f32>,
}

/// Hidden states by layer index. Index 0 is the embedding layer output;
/// index `l >= 1` is the output of transformer layer `l`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct HiddenStates {
    pub dim: usize,
    pub layers: BTreeMap<usize, LayerHidden>,
}

impl HiddenStates {
    pub fn generated_row(&self, layer: usize, position: usize) -> Option<&[f32]> {
        let lh = self.layers.get(&layer)?;
        let start = position * self.dim;
        lh.generated.get(start..start + self.dim)
    }

    pub fn visual_row(&self, layer: usize, position: usize) -> Option<&[f32]> {
        let lh = self.layers.get(&layer)?;
        let start = position * self.dim;
        lh.visual.get(start..start + self.dim)
    }

    pub fn n_generated(&self, layer: usize) -> Option<usize> {
        self.layers.get(&layer).map(|lh| lh.generated.len() / self.dim.max(1))
    }

    pub fn n_visual(&self, layer: usize) -> Option<usize> {
        self.layers.get(&layer).map(|lh| lh.visual.len() / self.dim.max(1))
    }
}

/// Which degradation, if any, a trace was produced under.
#[derive(Debug, Clone, PartialEq)]
pub enum Condition {
    Full,
    Blank,
    Masked(MaskSpec),
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Condition::Full => f.write_str("full"),
            Condition::Blank => f.write_str("blank"),
            Condition::Masked(m) => write!(f, "masked({})", m.kind),
        }
    }
}

/// One model run: realized tokens, per-step predictive statistics, exported
/// hidden states, and the generated-to-visual attention tensor.
///
/// Traces are immutable after construction and safe to share across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationTrace {
    pub tokens: Vec<u32>,
    pub steps: Vec<StepStats>,
    pub hidden: HiddenStates,
    pub attention: AttentionTensor,
    pub condition: Condition,
    /// Wall-clock seconds spent producing this trace.
    pub wall_time: f64,
}

impl GenerationTrace {
    pub fn n_generated(&self) -> usize {
        self.tokens.len()
    }

    /// A generation that emitted no tokens. Degenerate traces are excluded
    /// from scoring with an explicit per-sample status.
    pub fn is_degenerate(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        if self.steps.len() != self.tokens.len() {
            return Err(Error::InvalidTrace(format!(
                "{} steps for {} tokens",
                self.steps.len(),
                self.tokens.len()
            )));
        }
        if self.attention.n_queries() != self.tokens.len() {
            return Err(Error::InvalidTrace(format!(
                "attention has {} query rows for {} tokens",
                self.attention.n_queries(),
                self.tokens.len()
            )));
        }
        for &t in &self.tokens {
            if t as usize >= vocab_size {
                return Err(Error::InvalidTrace(format!(
                    "token id {t} outside vocabulary of size {vocab_size}"
                )));
            }
        }
        for s in &self.steps {
            s.validate(vocab_size)?;
        }
        self.attention.validate()
    }
}

// ---------------------------------------------------------------------------
// Decoding and pass accounting
// ---------------------------------------------------------------------------

/// Decoding strategy for generation calls.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoding {
    Greedy,
    Sample { temperature: f64, seed: u64 },
}

impl Decoding {
    /// Canonical string used in cache keys and provenance hashes.
    pub fn cache_token(&self) -> String {
        match self {
            Decoding::Greedy => "greedy".to_string(),
            Decoding::Sample { temperature, seed } => {
                format!("sample:t={temperature}:seed={seed}")
            }
        }
    }
}

/// Cumulative forward-pass counts for a backend family.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PassCounts {
    pub generate: u64,
    pub rescore: u64,
    pub text_queries: u64,
}

impl PassCounts {
    pub fn since(&self, earlier: PassCounts) -> PassCounts {
        PassCounts {
            generate: self.generate - earlier.generate,
            rescore: self.rescore - earlier.rescore,
            text_queries: self.text_queries - earlier.text_queries,
        }
    }

    pub fn total(&self) -> u64 {
        self.generate + self.rescore + self.text_queries
    }
}

/// Shared atomic counters behind [`PassCounts`]. Forked backend instances
/// share one counter set so the harness sees family-wide totals.
#[derive(Debug, Default)]
pub struct PassCounters {
    generate: AtomicU64,
    rescore: AtomicU64,
    text_queries: AtomicU64,
}

impl PassCounters {
    pub fn count_generate(&self) {
        self.generate.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count_rescore(&self) {
        self.rescore.fetch_add(1, Ordering::Relaxed);
    }

    pub fn count_text_query(&self) {
        self.text_queries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> PassCounts {
        PassCounts {
            generate: self.generate.load(Ordering::Relaxed),
            rescore: self.rescore.load(Ordering::Relaxed),
            text_queries: self.text_queries.load(Ordering::Relaxed),
        }
    }

    pub fn reset(&self) {
        self.generate.store(0, Ordering::Relaxed);
        self.rescore.store(0, Ordering::Relaxed);
        self.text_queries.store(0, Ordering::Relaxed);
    }
}

// ---------------------------------------------------------------------------
// Backend trait
// ---------------------------------------------------------------------------

/// The contract any scored model must satisfy.
///
/// Instances are single-owner: the `&mut self` receivers enforce one
/// in-flight generate/rescore call per instance. A harness that wants
/// concurrency forks one instance per worker with [`Backend::fork`]; forks
/// share pass counters but nothing else.
pub trait Backend: Send + Sync {
    /// Stable identifier covering the model and its configuration; part of
    /// every trace cache key.
    fn id(&self) -> String;

    fn vocab_size(&self) -> usize;

    /// Number of transformer layers `L`. Attention is exported for layers
    /// `0..L`; hidden states for layers `0..=L` with 0 the embedding output.
    fn n_layers(&self) -> usize;

    fn n_heads(&self) -> usize;

    /// Patch-grid geometry for an image reference.
    fn layout(&self, image_ref: &str) -> Result<VisualLayout>;

    /// Autoregressive generation under the full (undegraded) condition.
    fn generate(
        &mut self,
        image_ref: &str,
        prompt: &str,
        decoding: &Decoding,
        max_tokens: usize,
    ) -> Result<GenerationTrace>;

    /// Teacher-forced re-scoring of a fixed response under visual-token
    /// knockout: attention logits from every query to each masked visual key
    /// go to effectively negative infinity before row normalization, so each
    /// attention row still sums to 1 over the surviving keys. A blank mask
    /// knocks out all visual tokens.
    fn rescore(
        &mut self,
        image_ref: &str,
        prompt: &str,
        response_tokens: &[u32],
        mask: &MaskSpec,
    ) -> Result<GenerationTrace>;

    /// Second-round text query (used by the verbalized-confidence baseline).
    fn query_text(&mut self, image_ref: &str, prompt: &str) -> Result<String>;

    /// Plain-text rendering of a token sequence.
    fn detokenize(&self, tokens: &[u32]) -> String;

    /// A new independent instance of the same backend; pass counters are
    /// shared with the parent.
    fn fork(&self) -> Box<dyn Backend>;

    fn pass_counts(&self) -> PassCounts;

    fn reset_pass_counts(&self);
}
