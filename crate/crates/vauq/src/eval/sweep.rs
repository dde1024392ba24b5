//! Hyperparameter sweeps over (alpha, K, layer band) and cross-dataset
//! transfer of the selected parameters.
//!
//! Condition entropies are computed once per (band, K) cell and reused for
//! every alpha, so widening the alpha grid never triggers recomputation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, GenerationTrace, MaskKind, TraceCache};
use crate::error::{Error, Result};
use crate::eval::{auroc, EvalRecord};
use crate::pipeline::{cached_generate, cached_rescore, ScoringConfig};
use crate::saliency;
use crate::scores::{mean_entropy, VauqParams};

/// Minimum labeled samples a sweep will accept.
pub const MIN_LABELED: usize = 20;

/// Search grid plus the validation-split policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    pub alphas: Vec<f64>,
    pub ks: Vec<u32>,
    pub bands: Vec<(usize, usize)>,
    /// Fraction of labeled samples held out (per class) for selection.
    pub val_fraction: f64,
    pub seed: u64,
}

impl SweepGrid {
    /// Default grid: alpha over 0..=5 step 0.1, K over 0..=100 step 10, one
    /// band, a seeded 20% validation split.
    pub fn with_band(band: (usize, usize)) -> Self {
        Self {
            alphas: (0..=50).map(|i| i as f64 * 0.1).collect(),
            ks: (0..=10).map(|i| i * 10).collect(),
            bands: vec![band],
            val_fraction: 0.2,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.alphas.is_empty() || self.ks.is_empty() || self.bands.is_empty() {
            return Err(Error::InvalidConfig("sweep grid has an empty axis".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "validation fraction {} outside (0, 1)",
                self.val_fraction
            )));
        }
        if self.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
            return Err(Error::InvalidConfig("negative or non-finite alpha in grid".into()));
        }
        if self.ks.iter().any(|&k| k > 100) {
            return Err(Error::InvalidConfig("K above 100 in grid".into()));
        }
        Ok(())
    }
}

/// Which per-sample score the sweep evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreFamily {
    /// `h_full - alpha * IS_core`: the full (alpha, K, band) grid.
    Vauq,
    /// Plain length-normalized entropy: a single cell.
    Entropy,
    /// Negated core-masked image-information score: the (K, band) grid.
    IsCore,
}

/// One grid cell with its validation and test AUROC. Axes a family does not
/// use are `None`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub alpha: Option<f64>,
    pub k: Option<u32>,
    pub band: Option<(usize, usize)>,
    pub val_auroc: f64,
    pub test_auroc: f64,
}

/// Sweep result: the selected parameters, their split AUROCs, and the full
/// surface for plotting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepOutcome {
    pub family: ScoreFamily,
    pub best: VauqParams,
    pub val_auroc: f64,
    pub test_auroc: f64,
    pub cells: Vec<SweepCell>,
    pub labeled: usize,
    pub excluded_degenerate: usize,
}

struct PreparedSample {
    trace: GenerationTrace,
    h_full: f64,
    positive: u8,
}

struct Prepared {
    samples: Vec<PreparedSample>,
    val_idx: Vec<usize>,
    test_idx: Vec<usize>,
    excluded_degenerate: usize,
    image_refs: Vec<String>,
    questions: Vec<String>,
}

/// Seeded stratified split: each class is shuffled and contributes
/// `val_fraction` of its samples (at least one, never all) to validation.
fn stratified_split(
    labels: &[u8],
    frac: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val = Vec::new();
    let mut test = Vec::new();
    for class in [1u8, 0u8] {
        let mut idx: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect();
        if idx.len() < 2 {
            return Err(Error::UndefinedAuroc(format!(
                "class {class} has {} samples; need at least 2 to split",
                idx.len()
            )));
        }
        idx.shuffle(&mut rng);
        let n_val = ((frac * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        test.extend_from_slice(&idx[n_val..]);
    }
    val.sort_unstable();
    test.sort_unstable();
    Ok((val, test))
}

fn prepare(
    backend: &mut dyn Backend,
    cache: Option<&TraceCache>,
    cfg: &ScoringConfig,
    records: &[EvalRecord],
    grid: &SweepGrid,
) -> Result<Prepared> {
    let labeled: Vec<&EvalRecord> = records
        .iter()
        .filter(|r| r.label.as_positive().is_some())
        .collect();
    if labeled.len() < MIN_LABELED {
        return Err(Error::InsufficientLabeled {
            have: labeled.len(),
            need: MIN_LABELED,
        });
    }
    let mut samples = Vec::with_capacity(labeled.len());
    let mut image_refs = Vec::with_capacity(labeled.len());
    let mut questions = Vec::with_capacity(labeled.len());
    let mut excluded_degenerate = 0usize;
    for record in labeled {
        let trace = cached_generate(
            backend,
            cache,
            &cfg.decoding,
            &record.image_ref,
            &record.question,
            cfg.max_tokens,
        )?;
        if trace.is_degenerate() {
            excluded_degenerate += 1;
            log::warn!("sweep excludes degenerate sample {}", record.sample_id);
            continue;
        }
        let h_full = mean_entropy(&trace.steps)?;
        samples.push(PreparedSample {
            trace,
            h_full,
            positive: record.label.as_positive().expect("labeled"),
        });
        image_refs.push(record.image_ref.clone());
        questions.push(record.question.clone());
    }
    if samples.len() < MIN_LABELED {
        return Err(Error::InsufficientLabeled {
            have: samples.len(),
            need: MIN_LABELED,
        });
    }
    let labels: Vec<u8> = samples.iter().map(|s| s.positive).collect();
    let (val_idx, test_idx) = stratified_split(&labels, grid.val_fraction, grid.seed)?;
    Ok(Prepared {
        samples,
        val_idx,
        test_idx,
        excluded_degenerate,
        image_refs,
        questions,
    })
}

/// Core-masked mean entropy for every prepared sample at one (band, K) cell.
fn masked_entropies(
    backend: &mut dyn Backend,
    cache: Option<&TraceCache>,
    cfg: &ScoringConfig,
    prepared: &Prepared,
    band: (usize, usize),
    k: u32,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(prepared.samples.len());
    for (i, sample) in prepared.samples.iter().enumerate() {
        let map = saliency::aggregate_attention(&sample.trace, band)?;
        let mask = saliency::top_k_mask(&map, k)?;
        let h = if mask.kind == MaskKind::None {
            sample.h_full
        } else {
            let trace = cached_rescore(
                backend,
                cache,
                &cfg.decoding,
                &prepared.image_refs[i],
                &prepared.questions[i],
                &sample.trace.tokens,
                &mask,
            )?;
            mean_entropy(&trace.steps)?
        };
        out.push(h);
    }
    Ok(out)
}

fn subset_auroc(scores: &[f64], labels: &[u8], idx: &[usize]) -> Result<f64> {
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let l: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
    auroc(&s, &l)
}

fn cell_key(cell: &SweepCell) -> (f64, u32, (usize, usize)) {
    (
        cell.alpha.unwrap_or(0.0),
        cell.k.unwrap_or(0),
        cell.band.unwrap_or((0, 0)),
    )
}

fn select_best(cells: &[SweepCell]) -> &SweepCell {
    let mut best = &cells[0];
    for cell in &cells[1..] {
        let better = cell.val_auroc > best.val_auroc
            || (cell.val_auroc == best.val_auroc && {
                let (a, k, b) = cell_key(cell);
                let (ba, bk, bb) = cell_key(best);
                (a, k, b.0, b.1) < (ba, bk, bb.0, bb.1)
            });
        if better {
            best = cell;
        }
    }
    best
}

/// Sweeps the grid on the validation split and reports the test AUROC at the
/// selected parameters. Ties resolve to the smaller alpha, then K, then band.
pub fn sweep(
    backend: &dyn Backend,
    cache: Option<&TraceCache>,
    cfg: &ScoringConfig,
    records: &[EvalRecord],
    grid: &SweepGrid,
    family: ScoreFamily,
) -> Result<SweepOutcome> {
    grid.validate()?;
    let mut worker = backend.fork();
    let prepared = prepare(worker.as_mut(), cache, cfg, records, grid)?;
    let labels: Vec<u8> = prepared.samples.iter().map(|s| s.positive).collect();
    let h_full: Vec<f64> = prepared.samples.iter().map(|s| s.h_full).collect();

    let mut cells = Vec::new();
    match family {
        ScoreFamily::Entropy => {
            cells.push(SweepCell {
                alpha: None,
                k: None,
                band: None,
                val_auroc: subset_auroc(&h_full, &labels, &prepared.val_idx)?,
                test_auroc: subset_auroc(&h_full, &labels, &prepared.test_idx)?,
            });
        }
        ScoreFamily::IsCore | ScoreFamily::Vauq => {
            for &band in &grid.bands {
                for &k in &grid.ks {
                    let h_masked =
                        masked_entropies(worker.as_mut(), cache, cfg, &prepared, band, k)?;
                    match family {
                        ScoreFamily::IsCore => {
                            let scores: Vec<f64> = h_masked
                                .iter()
                                .zip(&h_full)
                                .map(|(hm, hf)| -(hm - hf))
                                .collect();
                            cells.push(SweepCell {
                                alpha: None,
                                k: Some(k),
                                band: Some(band),
                                val_auroc: subset_auroc(&scores, &labels, &prepared.val_idx)?,
                                test_auroc: subset_auroc(&scores, &labels, &prepared.test_idx)?,
                            });
                        }
                        ScoreFamily::Vauq => {
                            for &alpha in &grid.alphas {
                                let scores: Vec<f64> = h_masked
                                    .iter()
                                    .zip(&h_full)
                                    .map(|(hm, hf)| hf - alpha * (hm - hf))
                                    .collect();
                                cells.push(SweepCell {
                                    alpha: Some(alpha),
                                    k: Some(k),
                                    band: Some(band),
                                    val_auroc: subset_auroc(&scores, &labels, &prepared.val_idx)?,
                                    test_auroc: subset_auroc(&scores, &labels, &prepared.test_idx)?,
                                });
                            }
                        }
                        ScoreFamily::Entropy => unreachable!(),
                    }
                }
            }
        }
    }

    let best_cell = select_best(&cells);
    let best = VauqParams {
        alpha: best_cell.alpha.unwrap_or(0.0),
        k_percent: best_cell.k.unwrap_or(0),
        layer_band: best_cell.band.unwrap_or(grid.bands[0]),
    };
    Ok(SweepOutcome {
        family,
        best,
        val_auroc: best_cell.val_auroc,
        test_auroc: best_cell.test_auroc,
        cells,
        labeled: prepared.samples.len(),
        excluded_degenerate: prepared.excluded_degenerate,
    })
}

/// Transfer report: target AUROC at source-selected parameters, next to the
/// target-tuned AUROC on the same test split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferOutcome {
    pub source_params: VauqParams,
    pub target_params: VauqParams,
    /// Target test AUROC with parameters frozen from the source sweep.
    pub transferred_auroc: f64,
    /// Target test AUROC with parameters tuned on the target itself.
    pub tuned_auroc: f64,
    /// `tuned - transferred`.
    pub gap: f64,
}

/// Selects parameters on the source dataset, freezes them, and evaluates on
/// the target's test split.
pub fn transfer(
    backend: &dyn Backend,
    cache: Option<&TraceCache>,
    cfg: &ScoringConfig,
    source: &[EvalRecord],
    target: &[EvalRecord],
    grid: &SweepGrid,
) -> Result<TransferOutcome> {
    let source_outcome = sweep(backend, cache, cfg, source, grid, ScoreFamily::Vauq)?;
    let target_outcome = sweep(backend, cache, cfg, target, grid, ScoreFamily::Vauq)?;

    let mut worker = backend.fork();
    let prepared = prepare(worker.as_mut(), cache, cfg, target, grid)?;
    let labels: Vec<u8> = prepared.samples.iter().map(|s| s.positive).collect();
    let h_full: Vec<f64> = prepared.samples.iter().map(|s| s.h_full).collect();
    let p = source_outcome.best;
    let h_masked = masked_entropies(
        worker.as_mut(),
        cache,
        cfg,
        &prepared,
        p.layer_band,
        p.k_percent,
    )?;
    let scores: Vec<f64> = h_masked
        .iter()
        .zip(&h_full)
        .map(|(hm, hf)| hf - p.alpha * (hm - hf))
        .collect();
    let transferred_auroc = subset_auroc(&scores, &labels, &prepared.test_idx)?;

    Ok(TransferOutcome {
        source_params: source_outcome.best,
        target_params: target_outcome.best,
        transferred_auroc,
        tuned_auroc: target_outcome.test_auroc,
        gap: target_outcome.test_auroc - transferred_auroc,
    })
}
