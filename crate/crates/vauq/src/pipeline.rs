//! Per-sample scoring orchestration: wires the backend, the trace cache,
//! saliency masking and every score behind one entry point, sharing traces
//! and rescore passes across the scores that need them.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backend::{
    Backend, Decoding, GenerationTrace, MaskKind, MaskSpec, TraceCache, VisualLayout,
};
use crate::baselines::{
    self, SampleSet, ScoreOutcome, DEFAULT_EIGEN_RIDGE, DEFAULT_SVAR_BAND,
};
use crate::error::{Error, Result};
use crate::eval::EvalRecord;
use crate::report::{params_hash, ScoreName, ScoreRow};
use crate::saliency::{self, MaskRecord, SaliencyMap};
use crate::scores::{
    image_information_score, mean_entropy, vauq_score_with, BlankMode, ConditionEntropies,
    VauqParams,
};

/// Everything that parameterizes one scoring run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub decoding: Decoding,
    pub max_tokens: usize,
    pub vauq: VauqParams,
    /// Masking variant feeding the combined `vauq` score.
    pub vauq_mask: MaskKind,
    /// Inclusive layer range for the visual-attention-ratio baseline.
    pub svar_band: (usize, usize),
    /// Layers for the contextual-lens baseline; `None` means the middle layer.
    pub lens_text_layer: Option<usize>,
    pub lens_image_layer: Option<usize>,
    /// Hidden layer for response embeddings; `None` means the middle layer.
    pub embed_layer: Option<usize>,
    /// Number of sampled responses for dispersion scores.
    pub sample_k: usize,
    pub sample_temperature: f64,
    pub eigen_ridge: f64,
    /// Run seed; per-sample sampling and random-mask seeds derive from it.
    pub seed: u64,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            decoding: Decoding::Greedy,
            max_tokens: 128,
            vauq: VauqParams::default(),
            vauq_mask: MaskKind::Core,
            svar_band: DEFAULT_SVAR_BAND,
            lens_text_layer: None,
            lens_image_layer: None,
            embed_layer: None,
            sample_k: 5,
            sample_temperature: 1.0,
            eigen_ridge: DEFAULT_EIGEN_RIDGE,
            seed: 0,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        self.vauq.validate()?;
        if self.max_tokens == 0 {
            return Err(Error::InvalidConfig("max_tokens must be at least 1".into()));
        }
        if self.sample_k == 0 {
            return Err(Error::InvalidConfig("sample_k must be at least 1".into()));
        }
        if !(self.sample_temperature.is_finite() && self.sample_temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "sample_temperature {} must be positive",
                self.sample_temperature
            )));
        }
        if self.vauq_mask == MaskKind::None {
            return Err(Error::InvalidConfig(
                "vauq_mask cannot be the identity mask".into(),
            ));
        }
        Ok(())
    }

    fn middle_layer(&self, backend: &dyn Backend) -> usize {
        backend.n_layers() / 2
    }
}

/// Stable 64-bit hash for deriving per-sample seeds.
pub fn stable_hash(text: &str) -> u64 {
    let digest = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Cached backend calls
// ---------------------------------------------------------------------------

/// Generation with read-through caching.
pub fn cached_generate(
    backend: &mut dyn Backend,
    cache: Option<&TraceCache>,
    decoding: &Decoding,
    image_ref: &str,
    prompt: &str,
    max_tokens: usize,
) -> Result<GenerationTrace> {
    let key = cache.map(|_| {
        TraceCache::key(
            &backend.id(),
            &format!("gen|{}|max={max_tokens}", decoding.cache_token()),
            prompt,
            image_ref,
            None,
        )
    });
    if let (Some(cache), Some(key)) = (cache, &key) {
        if let Some(trace) = cache.load_trace(key)? {
            return Ok(trace);
        }
    }
    let trace = backend.generate(image_ref, prompt, decoding, max_tokens)?;
    if let (Some(cache), Some(key)) = (cache, &key) {
        cache.store_trace(key, &trace)?;
    }
    Ok(trace)
}

/// Teacher-forced rescoring with read-through caching. `gen_decoding` must be
/// the decoding that produced the fixed response, so the key is complete
/// without the token sequence itself.
pub fn cached_rescore(
    backend: &mut dyn Backend,
    cache: Option<&TraceCache>,
    gen_decoding: &Decoding,
    image_ref: &str,
    prompt: &str,
    response_tokens: &[u32],
    mask: &MaskSpec,
) -> Result<GenerationTrace> {
    let key = cache.map(|_| {
        TraceCache::key(
            &backend.id(),
            &format!("rescore|{}", gen_decoding.cache_token()),
            prompt,
            image_ref,
            Some(mask),
        )
    });
    if let (Some(cache), Some(key)) = (cache, &key) {
        if let Some(trace) = cache.load_trace(key)? {
            return Ok(trace);
        }
    }
    let trace = backend.rescore(image_ref, prompt, response_tokens, mask)?;
    if let (Some(cache), Some(key)) = (cache, &key) {
        cache.store_trace(key, &trace)?;
    }
    Ok(trace)
}

fn cached_query_text(
    backend: &mut dyn Backend,
    cache: Option<&TraceCache>,
    image_ref: &str,
    prompt: &str,
) -> Result<String> {
    let key = cache.map(|_| TraceCache::key(&backend.id(), "text-query", prompt, image_ref, None));
    if let (Some(cache), Some(key)) = (cache, &key) {
        if let Some(reply) = cache.load_text(key)? {
            return Ok(reply);
        }
    }
    let reply = backend.query_text(image_ref, prompt)?;
    if let (Some(cache), Some(key)) = (cache, &key) {
        cache.store_text(key, &reply)?;
    }
    Ok(reply)
}

// ---------------------------------------------------------------------------
// Per-sample scoring
// ---------------------------------------------------------------------------

/// Per-sample scoring status for the error manifest. Degenerate generations
/// are excluded from scoring but never silently dropped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    Degenerate,
    Failed,
}

/// A score that could not be computed for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoreError {
    pub score: ScoreName,
    pub detail: String,
}

/// Everything produced for one sample.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SampleScores {
    pub sample_id: String,
    pub status: SampleStatus,
    #[serde(skip)]
    pub rows: Vec<ScoreRow>,
    #[serde(skip)]
    pub masks: Vec<MaskRecord>,
    pub errors: Vec<ScoreError>,
}

struct SampleContext<'a> {
    backend: &'a mut dyn Backend,
    cache: Option<&'a TraceCache>,
    cfg: &'a ScoringConfig,
    record: &'a EvalRecord,
    layout: VisualLayout,
    full: Option<GenerationTrace>,
    saliency: Option<SaliencyMap>,
    core_mask: Option<MaskSpec>,
    degraded: BTreeMap<MaskKind, f64>,
    samples: Option<SampleSet>,
    masks: Vec<MaskRecord>,
}

impl<'a> SampleContext<'a> {
    fn new(
        backend: &'a mut dyn Backend,
        cache: Option<&'a TraceCache>,
        cfg: &'a ScoringConfig,
        record: &'a EvalRecord,
    ) -> Result<Self> {
        let mut layout = backend.layout(&record.image_ref)?;
        if let Some(regions) = &record.evidence_regions {
            layout = layout.with_evidence(regions.clone());
        }
        Ok(Self {
            backend,
            cache,
            cfg,
            record,
            layout,
            full: None,
            saliency: None,
            core_mask: None,
            degraded: BTreeMap::new(),
            samples: None,
            masks: Vec::new(),
        })
    }

    fn full(&mut self) -> Result<&GenerationTrace> {
        if self.full.is_none() {
            let trace = cached_generate(
                self.backend,
                self.cache,
                &self.cfg.decoding,
                &self.record.image_ref,
                &self.record.question,
                self.cfg.max_tokens,
            )?;
            if trace.is_degenerate() {
                return Err(Error::DegenerateSample(format!(
                    "sample {} generated no tokens",
                    self.record.sample_id
                )));
            }
            self.full = Some(trace);
        }
        Ok(self.full.as_ref().expect("memoized"))
    }

    fn h_full(&mut self) -> Result<f64> {
        let trace = self.full()?;
        mean_entropy(&trace.steps)
    }

    fn saliency_map(&mut self) -> Result<&SaliencyMap> {
        if self.saliency.is_none() {
            let band = self.cfg.vauq.layer_band;
            let map = saliency::aggregate_attention(self.full()?, band)?;
            self.saliency = Some(map);
        }
        Ok(self.saliency.as_ref().expect("memoized"))
    }

    fn core_mask(&mut self) -> Result<MaskSpec> {
        if self.core_mask.is_none() {
            let k = self.cfg.vauq.k_percent;
            let mask = saliency::top_k_mask(self.saliency_map()?, k)?;
            self.masks.push(MaskRecord::new(
                &self.record.sample_id,
                &mask,
                &self.layout,
                Some(k),
            ));
            self.core_mask = Some(mask);
        }
        Ok(self.core_mask.clone().expect("memoized"))
    }

    fn mask_for(&mut self, kind: MaskKind) -> Result<MaskSpec> {
        match kind {
            MaskKind::Core => self.core_mask(),
            MaskKind::Blank => Ok(MaskSpec::blank(self.layout.n_tokens)),
            MaskKind::None => Ok(MaskSpec::none(self.layout.n_tokens)),
            MaskKind::Random => {
                let cardinality = self.core_mask()?.cardinality();
                let seed = stable_hash(&format!(
                    "{}|{}|random-mask",
                    self.cfg.seed, self.record.sample_id
                ));
                let mask = saliency::random_mask(self.layout.n_tokens, cardinality, seed)?;
                self.masks.push(MaskRecord::new(
                    &self.record.sample_id,
                    &mask,
                    &self.layout,
                    None,
                ));
                Ok(mask)
            }
            MaskKind::GroundTruth => {
                let mask = saliency::ground_truth_mask(&self.layout)?;
                self.masks.push(MaskRecord::new(
                    &self.record.sample_id,
                    &mask,
                    &self.layout,
                    None,
                ));
                Ok(mask)
            }
        }
    }

    /// Length-normalized entropy of the fixed response under one degraded
    /// condition. A mask that degenerates to the identity needs no backend
    /// call: teacher-forcing fidelity makes it equal the full entropy.
    fn degraded_entropy(&mut self, kind: MaskKind) -> Result<f64> {
        if let Some(&h) = self.degraded.get(&kind) {
            return Ok(h);
        }
        let mask = self.mask_for(kind)?;
        let h = if mask.kind == MaskKind::None {
            self.h_full()?
        } else {
            let tokens = self.full()?.tokens.clone();
            let trace = cached_rescore(
                self.backend,
                self.cache,
                &self.cfg.decoding,
                &self.record.image_ref,
                &self.record.question,
                &tokens,
                &mask,
            )?;
            mean_entropy(&trace.steps)?
        };
        self.degraded.insert(kind, h);
        Ok(h)
    }

    /// Condition entropies carrying the full entropy plus one degraded
    /// condition, as recorded in report rows.
    fn condition_entropies(&mut self, kind: MaskKind) -> Result<ConditionEntropies> {
        let h_full = self.h_full()?;
        let h = self.degraded_entropy(kind)?;
        let mut ce = ConditionEntropies::new(h_full);
        ce = match kind {
            MaskKind::Blank => ce.with_blank(h, BlankMode::Knockout),
            other => ce.with_masked(other, h),
        };
        Ok(ce)
    }

    fn sample_set(&mut self) -> Result<&SampleSet> {
        if self.samples.is_none() {
            let embed_layer = self
                .cfg
                .embed_layer
                .unwrap_or_else(|| self.cfg.middle_layer(self.backend));
            let mut traces = Vec::with_capacity(self.cfg.sample_k);
            let mut texts = Vec::with_capacity(self.cfg.sample_k);
            for k in 0..self.cfg.sample_k {
                let seed = stable_hash(&format!(
                    "{}|{}|sample|{k}",
                    self.cfg.seed, self.record.sample_id
                ));
                let decoding = Decoding::Sample {
                    temperature: self.cfg.sample_temperature,
                    seed,
                };
                let trace = cached_generate(
                    self.backend,
                    self.cache,
                    &decoding,
                    &self.record.image_ref,
                    &self.record.question,
                    self.cfg.max_tokens,
                )?;
                if trace.is_degenerate() {
                    return Err(Error::DegenerateSample(format!(
                        "sampled response {k} for {} is empty",
                        self.record.sample_id
                    )));
                }
                texts.push(self.backend.detokenize(&trace.tokens));
                traces.push(trace);
            }
            self.samples = Some(SampleSet::from_traces(&traces, texts, embed_layer)?);
        }
        Ok(self.samples.as_ref().expect("memoized"))
    }

    fn verbalized(&mut self) -> Result<ScoreOutcome> {
        let answer = {
            let tokens = self.full()?.tokens.clone();
            self.backend.detokenize(&tokens)
        };
        let prompt = baselines::verbalized_prompt(&self.record.question, &answer);
        let reply = cached_query_text(
            self.backend,
            self.cache,
            &self.record.image_ref,
            &prompt,
        )?;
        Ok(baselines::score_confidence_reply(&reply))
    }

    fn base_provenance(&self) -> String {
        format!(
            "decoding={};max_tokens={};blank_mode=knockout",
            self.cfg.decoding.cache_token(),
            self.cfg.max_tokens
        )
    }

    fn mask_provenance(&self, kind: MaskKind) -> String {
        format!(
            "{};k={};band=({},{});mask={kind}",
            self.base_provenance(),
            self.cfg.vauq.k_percent,
            self.cfg.vauq.layer_band.0,
            self.cfg.vauq.layer_band.1,
        )
    }

    fn vauq_provenance(&self, kind: MaskKind) -> String {
        format!("{};alpha={}", self.mask_provenance(kind), self.cfg.vauq.alpha)
    }

    fn dispersion_provenance(&self) -> String {
        format!(
            "{};samples={};temperature={};seed={}",
            self.base_provenance(),
            self.cfg.sample_k,
            self.cfg.sample_temperature,
            self.cfg.seed
        )
    }

    /// One score value, its provenance string, optional condition
    /// entropies, and an optional flag.
    fn compute(
        &mut self,
        score: ScoreName,
    ) -> Result<(f64, String, Option<ConditionEntropies>, Option<String>)> {
        match score {
            ScoreName::Entropy => {
                let v = self.h_full()?;
                Ok((v, self.base_provenance(), None, None))
            }
            ScoreName::Perplexity => {
                let v = baselines::perplexity(&self.full()?.steps)?;
                Ok((v, self.base_provenance(), None, None))
            }
            ScoreName::Verbalized => {
                let out = self.verbalized()?;
                let prov = format!("{};parse=first-int-0-100", self.base_provenance());
                Ok((out.value, prov, None, out.flag))
            }
            ScoreName::Svar => {
                let band = self.cfg.svar_band;
                let v = baselines::svar(self.full()?, band)?;
                let prov = format!(
                    "{};svar_band=({},{})",
                    self.base_provenance(),
                    band.0,
                    band.1
                );
                Ok((v, prov, None, None))
            }
            ScoreName::ContextualLens => {
                let mid = self.cfg.middle_layer(self.backend);
                let lt = self.cfg.lens_text_layer.unwrap_or(mid);
                let li = self.cfg.lens_image_layer.unwrap_or(mid);
                let out = baselines::contextual_lens(self.full()?, lt, li)?;
                let prov = format!("{};text_layer={lt};image_layer={li}", self.base_provenance());
                Ok((out.value, prov, None, out.flag))
            }
            ScoreName::ChainOfEmbeddings => {
                let v = baselines::chain_of_embeddings(self.full()?)?;
                Ok((v, self.base_provenance(), None, None))
            }
            ScoreName::EigenScore => {
                let ridge = self.cfg.eigen_ridge;
                let embed = self
                    .cfg
                    .embed_layer
                    .unwrap_or_else(|| self.cfg.middle_layer(self.backend));
                let v = baselines::eigenscore(self.sample_set()?, ridge)?;
                let prov = format!(
                    "{};embed_layer={embed};ridge={ridge};cov=centered/K",
                    self.dispersion_provenance()
                );
                Ok((v, prov, None, None))
            }
            ScoreName::SemanticEntropy => {
                let v = baselines::semantic_entropy(self.sample_set()?, &baselines::NormalizedMatch)?;
                let prov = format!("{};equiv=normalized-exact", self.dispersion_provenance());
                Ok((v, prov, None, None))
            }
            ScoreName::IsBlank | ScoreName::IsCore | ScoreName::IsRand | ScoreName::IsGt => {
                let kind = match score {
                    ScoreName::IsBlank => MaskKind::Blank,
                    ScoreName::IsCore => MaskKind::Core,
                    ScoreName::IsRand => MaskKind::Random,
                    _ => MaskKind::GroundTruth,
                };
                let ce = self.condition_entropies(kind)?;
                let is = image_information_score(&ce, kind)?;
                // negated: raw IS grows with grounding, reports grow with risk
                Ok((-is, self.mask_provenance(kind), Some(ce), None))
            }
            ScoreName::Vauq | ScoreName::VauqBlank | ScoreName::VauqRand | ScoreName::VauqGt => {
                let kind = match score {
                    ScoreName::Vauq => self.cfg.vauq_mask,
                    ScoreName::VauqBlank => MaskKind::Blank,
                    ScoreName::VauqRand => MaskKind::Random,
                    _ => MaskKind::GroundTruth,
                };
                let ce = self.condition_entropies(kind)?;
                let v = vauq_score_with(&ce, self.cfg.vauq.alpha, kind)?;
                Ok((v, self.vauq_provenance(kind), Some(ce), None))
            }
            ScoreName::VlUncertainty => Err(Error::UnsupportedScore(
                score.to_string(),
                "needs external semantic perturbation of inputs and an entailment model".into(),
            )),
        }
    }
}

/// Scores one record. Errors are per-score; a degenerate generation marks
/// the whole sample degenerate and produces no rows.
pub fn score_record(
    backend: &mut dyn Backend,
    cache: Option<&TraceCache>,
    cfg: &ScoringConfig,
    record: &EvalRecord,
    scores: &[ScoreName],
) -> SampleScores {
    let mut ctx = match SampleContext::new(backend, cache, cfg, record) {
        Ok(ctx) => ctx,
        Err(e) => {
            return SampleScores {
                sample_id: record.sample_id.clone(),
                status: SampleStatus::Failed,
                rows: Vec::new(),
                masks: Vec::new(),
                errors: scores
                    .iter()
                    .map(|&score| ScoreError {
                        score,
                        detail: e.to_string(),
                    })
                    .collect(),
            };
        }
    };
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    let mut status = SampleStatus::Ok;
    for &score in scores {
        match ctx.compute(score) {
            Ok((value, provenance, condition_entropies, flag)) => rows.push(ScoreRow {
                sample_id: record.sample_id.clone(),
                score_name: score,
                value,
                params_hash: params_hash(&format!("score={score};{provenance}")),
                condition_entropies,
                flag,
            }),
            Err(Error::DegenerateSample(detail)) => {
                log::warn!("excluding degenerate sample: {detail}");
                status = SampleStatus::Degenerate;
                rows.clear();
                errors.clear();
                break;
            }
            Err(e) => errors.push(ScoreError {
                score,
                detail: e.to_string(),
            }),
        }
    }
    if status == SampleStatus::Ok && rows.is_empty() && !errors.is_empty() {
        status = SampleStatus::Failed;
    }
    let masks = std::mem::take(&mut ctx.masks);
    SampleScores {
        sample_id: record.sample_id.clone(),
        status,
        rows,
        masks,
        errors,
    }
}

/// Scores a whole dataset, optionally in parallel. Workers run forked
/// backend instances (one in-flight call per instance); results merge in
/// sample-id order regardless of scheduling.
pub fn score_dataset(
    backend: &dyn Backend,
    cache: Option<&TraceCache>,
    cfg: &ScoringConfig,
    records: &[EvalRecord],
    scores: &[ScoreName],
    jobs: usize,
) -> Result<Vec<SampleScores>> {
    cfg.validate()?;
    let jobs = jobs.max(1);
    let mut results: Vec<SampleScores> = if jobs == 1 {
        let mut owned = backend.fork();
        records
            .iter()
            .map(|record| score_record(owned.as_mut(), cache, cfg, record, scores))
            .collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("cannot build worker pool: {e}")))?;
        pool.install(|| {
            records
                .par_iter()
                .map_init(
                    || backend.fork(),
                    |worker, record| score_record(worker.as_mut(), cache, cfg, record, scores),
                )
                .collect()
        })
    };
    results.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    Ok(results)
}
