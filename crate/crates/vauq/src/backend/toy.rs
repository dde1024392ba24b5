//! Deterministic closed-form backend for desk-scale oracle testing.
//!
//! Per-step logits are `z = beta_img * g * onehot(answer_img) +
//! beta_prior * onehot(answer_prior)`, where `g` is the fraction of evidence
//! patches still visible under the active mask. Attention inside a
//! configurable grounded layer band concentrates a fraction `rho` of the
//! visual mass on the focus region (the evidence patches unless overridden)
//! and is uniform over visual tokens outside the band, so layer-band
//! aggregation recovers the evidence while whole-network aggregation is
//! noisier.
//!
//! Per-sample parameter overrides ride on the opaque image reference in a
//! `toy:key=value;...` microformat, which lets one backend instance serve a
//! whole dataset of differently parameterized samples.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    AttentionTensor, Backend, BoundingBox, Condition, Decoding, GenerationTrace, HiddenStates,
    LayerHidden, MaskKind, MaskSpec, PassCounters, PassCounts, StepStats, VisualLayout,
};
use crate::error::{Error, Result};

/// Configuration for [`ToyBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyConfig {
    /// Vocabulary size `V >= 2`.
    pub vocab_size: usize,
    /// Patch grid `(rows, cols)`; the visual sequence has `rows * cols` tokens.
    pub grid: (usize, usize),
    /// Transformer layer count `L`; attention is exported for layers `0..L`
    /// and hidden states for `0..=L`.
    pub n_layers: usize,
    pub n_heads: usize,
    pub hidden_dim: usize,
    /// Inclusive attention-layer range that focuses on the evidence region.
    pub grounded_band: (usize, usize),
    /// Fraction of per-row visual mass placed on the focus region inside the
    /// grounded band.
    pub rho: f64,
    /// Fraction of each attention row's total mass that goes to visual keys;
    /// the remainder models prompt/response keys and is never exported.
    pub visual_frac: f64,
    /// Response length `M`; 0 models a degenerate generation.
    pub answer_len: usize,
    /// Evidence patch indices. May be empty only while `beta_img == 0`.
    pub evidence: Vec<usize>,
    /// Patches the grounded band actually attends to; defaults to the
    /// evidence set. Distinct values model attention missing the evidence.
    pub focus: Option<Vec<usize>>,
    /// Token promoted by visible evidence.
    pub answer_img: u32,
    /// Token promoted by the language prior. May equal `answer_img`.
    pub answer_prior: u32,
    pub beta_img: f64,
    pub beta_prior: f64,
    /// Log-normal sigma for per-patch attention jitter inside the grounded
    /// band; 0 keeps the band weights exact.
    pub attn_jitter: f64,
    /// Hidden-state layers to export; `None` exports every layer `0..=L`.
    /// Index 0 is the embedding layer output.
    pub hidden_layers: Option<Vec<usize>>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            grid: (4, 4),
            n_layers: 26,
            n_heads: 4,
            hidden_dim: 8,
            grounded_band: (10, 25),
            rho: 0.9,
            visual_frac: 0.6,
            answer_len: 4,
            evidence: vec![0, 1, 4, 5],
            focus: None,
            answer_img: 3,
            answer_prior: 3,
            beta_img: 4.0,
            beta_prior: 1.0,
            attn_jitter: 0.0,
            hidden_layers: None,
        }
    }
}

impl ToyConfig {
    pub fn n_tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    /// Sorts and dedups index sets, then checks every field constraint.
    pub fn canonicalize(mut self) -> Result<Self> {
        self.evidence.sort_unstable();
        self.evidence.dedup();
        if let Some(focus) = self.focus.as_mut() {
            focus.sort_unstable();
            focus.dedup();
        }
        if let Some(layers) = self.hidden_layers.as_mut() {
            layers.sort_unstable();
            layers.dedup();
        }
        self.validate()?;
        Ok(self)
    }

    fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} < 2",
                self.vocab_size
            )));
        }
        if self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::InvalidConfig("empty patch grid".into()));
        }
        if self.n_layers == 0 || self.n_heads == 0 || self.hidden_dim == 0 {
            return Err(Error::InvalidConfig(
                "n_layers, n_heads and hidden_dim must be positive".into(),
            ));
        }
        let (ls, le) = self.grounded_band;
        if ls > le || le >= self.n_layers {
            return Err(Error::InvalidConfig(format!(
                "grounded band ({ls}, {le}) outside layers 0..{}",
                self.n_layers
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidConfig(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(self.visual_frac > 0.0 && self.visual_frac < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "visual_frac {} outside (0, 1)",
                self.visual_frac
            )));
        }
        let n = self.n_tokens();
        for set in [Some(&self.evidence), self.focus.as_ref()].into_iter().flatten() {
            if let Some(&max) = set.last() {
                if max >= n {
                    return Err(Error::InvalidConfig(format!(
                        "patch index {max} outside grid of {n} tokens"
                    )));
                }
            }
        }
        if self.beta_img < 0.0 || self.beta_prior < 0.0 {
            return Err(Error::InvalidConfig("negative logit weight".into()));
        }
        if self.evidence.is_empty() && self.beta_img > 0.0 {
            return Err(Error::InvalidConfig(
                "beta_img > 0 requires a non-empty evidence set".into(),
            ));
        }
        if self.answer_img as usize >= self.vocab_size
            || self.answer_prior as usize >= self.vocab_size
        {
            return Err(Error::InvalidConfig("answer token outside vocabulary".into()));
        }
        if self.attn_jitter < 0.0 || !self.attn_jitter.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "attn_jitter {} must be finite and non-negative",
                self.attn_jitter
            )));
        }
        if let Some(layers) = &self.hidden_layers {
            if let Some(&max) = layers.last() {
                if max > self.n_layers {
                    return Err(Error::InvalidConfig(format!(
                        "hidden layer {max} outside 0..={}",
                        self.n_layers
                    )));
                }
            }
        }
        Ok(())
    }
}

/// The deterministic toy multimodal backend.
pub struct ToyBackend {
    base: ToyConfig,
    id: String,
    counters: Arc<PassCounters>,
}

impl ToyBackend {
    pub fn new(config: ToyConfig) -> Result<Self> {
        let base = config.canonicalize()?;
        let canon = serde_json::to_string(&base)?;
        let digest = Sha256::digest(canon.as_bytes());
        let id = format!("toy-{}", hex::encode(&digest[..6]));
        Ok(Self {
            base,
            id,
            counters: Arc::new(PassCounters::default()),
        })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.base
    }

    /// Applies the `toy:key=value;...` per-sample overrides carried by an
    /// image reference. The empty reference means the base configuration.
    pub fn resolve(&self, image_ref: &str) -> Result<ToyConfig> {
        if image_ref.is_empty() {
            return Ok(self.base.clone());
        }
        let body = image_ref.strip_prefix("toy:").ok_or_else(|| Error::ImageRef {
            reference: image_ref.to_string(),
            detail: "expected the empty string or a toy:key=value;... reference".into(),
        })?;
        let bad = |detail: String| Error::ImageRef {
            reference: image_ref.to_string(),
            detail,
        };
        let mut cfg = self.base.clone();
        let layout = VisualLayout::new(cfg.grid.0, cfg.grid.1)?;
        for pair in body.split(';').filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| bad(format!("field {pair:?} is not key=value")))?;
            match key {
                "aimg" => cfg.answer_img = parse_num(value).map_err(&bad)?,
                "aprior" => cfg.answer_prior = parse_num(value).map_err(&bad)?,
                "bimg" => cfg.beta_img = parse_num(value).map_err(&bad)?,
                "bprior" => cfg.beta_prior = parse_num(value).map_err(&bad)?,
                "alen" => cfg.answer_len = parse_num(value).map_err(&bad)?,
                "jitter" => cfg.attn_jitter = parse_num(value).map_err(&bad)?,
                "ev" => cfg.evidence = layout.patches_in_boxes(&[parse_box(value).map_err(&bad)?]),
                "ei" => cfg.evidence = parse_indices(value).map_err(&bad)?,
                "af" => {
                    cfg.focus = Some(layout.patches_in_boxes(&[parse_box(value).map_err(&bad)?]));
                }
                "ai" => cfg.focus = Some(parse_indices(value).map_err(&bad)?),
                other => return Err(bad(format!("unknown field {other:?}"))),
            }
        }
        cfg.canonicalize()
    }

    fn build_trace(
        &self,
        cfg: &ToyConfig,
        tokens: Vec<u32>,
        steps: Vec<StepStats>,
        mask: Option<&MaskSpec>,
        condition: Condition,
        started: Instant,
    ) -> GenerationTrace {
        let attention = build_attention(cfg, tokens.len(), mask);
        let hidden = build_hidden(cfg, &tokens);
        GenerationTrace {
            tokens,
            steps,
            hidden,
            attention,
            condition,
            wall_time: started.elapsed().as_secs_f64(),
        }
    }
}

impl Backend for ToyBackend {
    fn id(&self) -> String {
        self.id.clone()
    }

    fn vocab_size(&self) -> usize {
        self.base.vocab_size
    }

    fn n_layers(&self) -> usize {
        self.base.n_layers
    }

    fn n_heads(&self) -> usize {
        self.base.n_heads
    }

    fn layout(&self, image_ref: &str) -> Result<VisualLayout> {
        let cfg = self.resolve(image_ref)?;
        VisualLayout::new(cfg.grid.0, cfg.grid.1)
    }

    fn generate(
        &mut self,
        image_ref: &str,
        prompt: &str,
        decoding: &Decoding,
        max_tokens: usize,
    ) -> Result<GenerationTrace> {
        let _ = prompt;
        let started = Instant::now();
        if max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
        }
        let cfg = self.resolve(image_ref)?;
        let m = cfg.answer_len.min(max_tokens);
        let z = logits(&cfg, visible_evidence_fraction(&cfg, None));
        let (logp, entropy) = softmax_stats(&z);

        let tokens: Vec<u32> = match decoding {
            Decoding::Greedy => vec![argmax(&z) as u32; m],
            Decoding::Sample { temperature, seed } => {
                if !(temperature.is_finite() && *temperature > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "sampling temperature {temperature} must be positive"
                    )));
                }
                let scaled: Vec<f64> = z.iter().map(|v| v / temperature).collect();
                let (sample_logp, _) = softmax_stats(&scaled);
                let probs: Vec<f64> = sample_logp.iter().map(|lp| lp.exp()).collect();
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                (0..m).map(|_| draw(&probs, &mut rng) as u32).collect()
            }
        };
        let steps: Vec<StepStats> = tokens
            .iter()
            .map(|&t| StepStats {
                entropy,
                logprob_realized: logp[t as usize],
            })
            .collect();
        self.counters.count_generate();
        Ok(self.build_trace(&cfg, tokens, steps, None, Condition::Full, started))
    }

    fn rescore(
        &mut self,
        image_ref: &str,
        prompt: &str,
        response_tokens: &[u32],
        mask: &MaskSpec,
    ) -> Result<GenerationTrace> {
        let _ = prompt;
        let started = Instant::now();
        if response_tokens.is_empty() {
            return Err(Error::EmptyResponse);
        }
        let cfg = self.resolve(image_ref)?;
        let n = cfg.n_tokens();
        if mask.n_tokens != n {
            return Err(Error::InvalidMask(format!(
                "mask built for {} visual tokens, backend exposes {n}",
                mask.n_tokens
            )));
        }
        if let Some(&max) = mask.indices.last() {
            if max >= n {
                return Err(Error::MaskIndexOutOfRange {
                    index: max,
                    n_tokens: n,
                });
            }
        }
        for &t in response_tokens {
            if t as usize >= cfg.vocab_size {
                return Err(Error::InvalidTrace(format!(
                    "response token {t} outside vocabulary of size {}",
                    cfg.vocab_size
                )));
            }
        }
        let z = logits(&cfg, visible_evidence_fraction(&cfg, Some(mask)));
        let (logp, entropy) = softmax_stats(&z);
        let steps: Vec<StepStats> = response_tokens
            .iter()
            .map(|&t| StepStats {
                entropy,
                logprob_realized: logp[t as usize],
            })
            .collect();
        let condition = match mask.kind {
            MaskKind::Blank => Condition::Blank,
            _ => Condition::Masked(mask.clone()),
        };
        self.counters.count_rescore();
        Ok(self.build_trace(
            &cfg,
            response_tokens.to_vec(),
            steps,
            Some(mask),
            condition,
            started,
        ))
    }

    fn query_text(&mut self, image_ref: &str, prompt: &str) -> Result<String> {
        let _ = prompt;
        let cfg = self.resolve(image_ref)?;
        let z = logits(&cfg, visible_evidence_fraction(&cfg, None));
        let (logp, _) = softmax_stats(&z);
        let p_max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max).exp();
        self.counters.count_text_query();
        Ok(format!("{}", (p_max * 100.0).round() as i64))
    }

    fn detokenize(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .map(|t| format!("tok{t}"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    fn fork(&self) -> Box<dyn Backend> {
        Box::new(ToyBackend {
            base: self.base.clone(),
            id: self.id.clone(),
            counters: Arc::clone(&self.counters),
        })
    }

    fn pass_counts(&self) -> PassCounts {
        self.counters.snapshot()
    }

    fn reset_pass_counts(&self) {
        self.counters.reset();
    }
}

// ---------------------------------------------------------------------------
// Closed-form internals
// ---------------------------------------------------------------------------

fn parse_num<T: std::str::FromStr>(value: &str) -> std::result::Result<T, String> {
    value
        .parse::<T>()
        .map_err(|_| format!("cannot parse {value:?}"))
}

fn parse_box(value: &str) -> std::result::Result<BoundingBox, String> {
    let parts: Vec<f64> = value
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| format!("bad box {value:?}")))
        .collect::<std::result::Result<_, _>>()?;
    if parts.len() != 4 {
        return Err(format!("box {value:?} needs 4 coordinates"));
    }
    BoundingBox::new(parts[0], parts[1], parts[2], parts[3]).map_err(|e| e.to_string())
}

fn parse_indices(value: &str) -> std::result::Result<Vec<usize>, String> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad index list {value:?}")))
        .collect()
}

/// Fraction of the evidence set still visible under `mask`.
fn visible_evidence_fraction(cfg: &ToyConfig, mask: Option<&MaskSpec>) -> f64 {
    if cfg.evidence.is_empty() {
        return 0.0;
    }
    let visible = match mask {
        None => cfg.evidence.len(),
        Some(m) => cfg.evidence.iter().filter(|&&i| !m.is_masked(i)).count(),
    };
    visible as f64 / cfg.evidence.len() as f64
}

fn logits(cfg: &ToyConfig, g: f64) -> Vec<f64> {
    let mut z = vec![0.0f64; cfg.vocab_size];
    z[cfg.answer_img as usize] += cfg.beta_img * g;
    z[cfg.answer_prior as usize] += cfg.beta_prior;
    z
}

/// Log-softmax and entropy via a numerically stable log-sum-exp.
fn softmax_stats(z: &[f64]) -> (Vec<f64>, f64) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = z.iter().map(|v| v - lse).collect();
    let entropy = -logp.iter().map(|lp| lp.exp() * lp).sum::<f64>();
    (logp, entropy.max(0.0))
}

/// First index of the maximum value, so ties resolve to the lowest token id.
fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn mix(mut h: u64, v: u64) -> u64 {
    // splitmix64 step
    h ^= v.wrapping_add(0x9e37_79b9_7f4a_7c15);
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Deterministic unit vector for one (tag, index, layer) triple.
fn unit_vector(tag: u64, index: u64, layer: u64, dim: usize) -> Vec<f32> {
    let seed = mix(mix(mix(0x0074_6f79u64, tag), index), layer);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0f32..1.0f32)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt();
    if norm > 0.0 {
        for x in &mut v {
            *x /= norm;
        }
    } else {
        v[0] = 1.0;
    }
    v
}

fn build_hidden(cfg: &ToyConfig, tokens: &[u32]) -> HiddenStates {
    let n = cfg.n_tokens();
    let requested: Vec<usize> = match &cfg.hidden_layers {
        Some(layers) => layers.clone(),
        None => (0..=cfg.n_layers).collect(),
    };
    let mut layers = std::collections::BTreeMap::new();
    for layer in requested {
        let mut generated = Vec::with_capacity(tokens.len() * cfg.hidden_dim);
        for &t in tokens {
            generated.extend(unit_vector(1, t as u64, layer as u64, cfg.hidden_dim));
        }
        let mut visual = Vec::with_capacity(n * cfg.hidden_dim);
        for i in 0..n {
            visual.extend(unit_vector(2, i as u64, layer as u64, cfg.hidden_dim));
        }
        layers.insert(layer, LayerHidden { generated, visual });
    }
    HiddenStates {
        dim: cfg.hidden_dim,
        layers,
    }
}

/// Per-patch jitter factors, seeded from the resolved configuration so the
/// pattern is stable per sample and per condition.
fn jitter_factors(cfg: &ToyConfig) -> Vec<f64> {
    let n = cfg.n_tokens();
    if cfg.attn_jitter == 0.0 {
        return vec![1.0; n];
    }
    let canon = serde_json::to_string(cfg).expect("toy config serializes");
    let digest = Sha256::digest(canon.as_bytes());
    let seed = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            // Box-Muller standard normal
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen();
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            (cfg.attn_jitter * z).exp()
        })
        .collect()
}

fn build_attention(cfg: &ToyConfig, m: usize, mask: Option<&MaskSpec>) -> AttentionTensor {
    let n = cfg.n_tokens();
    let (ls, le) = cfg.grounded_band;
    let focus: &[usize] = cfg.focus.as_deref().unwrap_or(&cfg.evidence);
    let jitter = jitter_factors(cfg);
    let mut att = AttentionTensor::zeros(cfg.n_layers, cfg.n_heads, m, n);
    for layer in 0..cfg.n_layers {
        let in_band = layer >= ls && layer <= le;
        let mut row = vec![0.0f64; n];
        if in_band && !focus.is_empty() && focus.len() < n {
            let inside = cfg.visual_frac * cfg.rho / focus.len() as f64;
            let outside = cfg.visual_frac * (1.0 - cfg.rho) / (n - focus.len()) as f64;
            row.iter_mut().for_each(|w| *w = outside);
            for &i in focus {
                row[i] = inside;
            }
        } else {
            row.iter_mut().for_each(|w| *w = cfg.visual_frac / n as f64);
        }
        if in_band && cfg.attn_jitter > 0.0 {
            for (w, j) in row.iter_mut().zip(&jitter) {
                *w *= j;
            }
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                let scale = cfg.visual_frac / sum;
                row.iter_mut().for_each(|w| *w *= scale);
            }
        }
        if let Some(mask) = mask {
            // Knockout: masked keys drop to exactly zero and the whole row
            // (including the unexported non-visual share) renormalizes over
            // the survivors.
            let masked_mass: f64 = mask.indices.iter().map(|&i| row[i]).sum();
            let scale = 1.0 / (1.0 - masked_mass);
            for (i, w) in row.iter_mut().enumerate() {
                *w = if mask.is_masked(i) { 0.0 } else { *w * scale };
            }
        }
        let row_f32: Vec<f32> = row.iter().map(|&w| w as f32).collect();
        for head in 0..cfg.n_heads {
            for query in 0..m {
                att.visual_row_mut(layer, head, query).copy_from_slice(&row_f32);
            }
        }
    }
    att
}
