//! Synthetic toy populations for desk-scale evaluation.
//!
//! Each record carries its own toy parameters on the image reference, so one
//! backend instance serves the whole dataset. The mixed population pairs a
//! factual half (image agrees with the language prior) with a counterfactual
//! half (image contradicts it), each with correct and hallucinated cells:
//!
//! - factual-correct: prior and image agree and are strong; low entropy.
//! - factual-hallucinated: weak diffuse logits on a wrong answer; high entropy.
//! - counterfactual-correct: image-driven answer against a weak prior;
//!   masking the evidence costs a lot of certainty.
//! - counterfactual-hallucinated: a confident prior-driven wrong answer;
//!   low entropy that survives any mask.
//!
//! Entropy alone separates the factual half and fails on the counterfactual
//! half; the image-information score does the reverse. A fraction of the
//! grounded samples get their attention focus displaced off the evidence to
//! model attention missing the relevant region.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{Backend, BoundingBox, Decoding, ToyBackend, ToyConfig};
use crate::error::Result;
use crate::eval::{EvalRecord, Label, Split};
use crate::pipeline::stable_hash;

/// Population flavors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PopulationKind {
    /// 50% factual / 50% counterfactual, balanced labels per split.
    Mixed,
    /// Logits ignore the image entirely (`beta_img = 0` everywhere), so every
    /// image-information score is identically zero.
    ImageIgnoring,
    /// 20% factual / 80% counterfactual.
    CounterfactualHeavy,
}

/// Parameters of a generated population.
#[derive(Debug, Clone)]
pub struct PopulationSpec {
    pub kind: PopulationKind,
    pub n_samples: usize,
    pub seed: u64,
    pub dataset_name: String,
    /// Fraction of grounded counterfactual samples whose attention focuses on
    /// the wrong region.
    pub misleading_frac: f64,
    /// Attention jitter applied inside the grounded band.
    pub attn_jitter: f64,
}

impl PopulationSpec {
    pub fn new(kind: PopulationKind, n_samples: usize, seed: u64, name: &str) -> Self {
        Self {
            kind,
            n_samples,
            seed,
            dataset_name: name.to_string(),
            misleading_frac: 0.15,
            attn_jitter: 0.25,
        }
    }
}

/// The base toy configuration the generated records assume. Populations
/// override per-sample fields via the image reference; grid, layer count and
/// grounded band come from here and must match the scoring configuration's
/// layer band.
pub fn population_backend() -> ToyConfig {
    ToyConfig::default()
}

const QUADRANTS: [(f64, f64, f64, f64); 4] = [
    (0.0, 0.0, 0.5, 0.5),
    (0.5, 0.0, 1.0, 0.5),
    (0.0, 0.5, 0.5, 1.0),
    (0.5, 0.5, 1.0, 1.0),
];

#[derive(Clone, Copy)]
enum Cell {
    FactualCorrect,
    FactualHallucinated,
    CounterfactualCorrect,
    CounterfactualHallucinated,
    PriorCorrect,
    PriorHallucinated,
}

fn cell_for(kind: PopulationKind, i: usize) -> Cell {
    match kind {
        PopulationKind::Mixed => match i % 4 {
            0 => Cell::FactualCorrect,
            1 => Cell::CounterfactualCorrect,
            2 => Cell::FactualHallucinated,
            _ => Cell::CounterfactualHallucinated,
        },
        PopulationKind::ImageIgnoring => match i % 2 {
            0 => Cell::PriorCorrect,
            _ => Cell::PriorHallucinated,
        },
        PopulationKind::CounterfactualHeavy => match i % 10 {
            0 => Cell::FactualCorrect,
            5 => Cell::FactualHallucinated,
            1 | 3 | 7 | 9 => Cell::CounterfactualCorrect,
            _ => Cell::CounterfactualHallucinated,
        },
    }
}

fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.gen_range(lo..hi)
}

fn distinct_tokens(rng: &mut ChaCha8Rng, vocab: usize) -> (u32, u32) {
    let a = rng.gen_range(0..vocab) as u32;
    let mut b = rng.gen_range(0..vocab) as u32;
    while b == a {
        b = rng.gen_range(0..vocab) as u32;
    }
    (a, b)
}

/// Generates a labeled population. Labels come from actually running the toy
/// backend greedily on each record, so they agree with the scoring pipeline
/// by construction.
pub fn generate_population(spec: &PopulationSpec) -> Result<Vec<EvalRecord>> {
    let base = population_backend();
    let vocab = base.vocab_size;
    let mut labeler = ToyBackend::new(base)?;
    let mut records = Vec::with_capacity(spec.n_samples);
    for i in 0..spec.n_samples {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&format!(
            "{}|{}|{i}",
            spec.seed, spec.dataset_name
        )));
        let cell = cell_for(spec.kind, i);
        let ev_quadrant = QUADRANTS[rng.gen_range(0..4)];
        let mut focus_quadrant = None;
        let (answer_img, answer_prior, beta_img, beta_prior, truth, split) = match cell {
            Cell::FactualCorrect => {
                let t = rng.gen_range(0..vocab) as u32;
                let bi = uniform(&mut rng, 2.5, 4.0);
                let bp = uniform(&mut rng, 1.5, 3.0);
                (t, t, bi, bp, t, Split::Factual)
            }
            Cell::FactualHallucinated => {
                let (t, truth) = distinct_tokens(&mut rng, vocab);
                let bi = uniform(&mut rng, 0.3, 0.9);
                let bp = uniform(&mut rng, 0.3, 0.9);
                (t, t, bi, bp, truth, Split::Factual)
            }
            Cell::CounterfactualCorrect => {
                let (v, w) = distinct_tokens(&mut rng, vocab);
                let bi = uniform(&mut rng, 4.0, 6.0);
                let bp = uniform(&mut rng, 0.5, 1.5);
                if rng.gen_bool(spec.misleading_frac) {
                    let mut q = rng.gen_range(0..4);
                    while QUADRANTS[q] == ev_quadrant {
                        q = rng.gen_range(0..4);
                    }
                    focus_quadrant = Some(QUADRANTS[q]);
                }
                (v, w, bi, bp, v, Split::Counterfactual)
            }
            Cell::CounterfactualHallucinated => {
                let (v, w) = distinct_tokens(&mut rng, vocab);
                let bi = uniform(&mut rng, 0.1, 0.5);
                let bp = uniform(&mut rng, 4.0, 6.0);
                (v, w, bi, bp, v, Split::Counterfactual)
            }
            Cell::PriorCorrect => {
                let t = rng.gen_range(0..vocab) as u32;
                let bp = uniform(&mut rng, 3.0, 5.0);
                (t, t, 0.0, bp, t, Split::None)
            }
            Cell::PriorHallucinated => {
                let (t, truth) = distinct_tokens(&mut rng, vocab);
                let bp = uniform(&mut rng, 0.5, 1.5);
                (t, t, 0.0, bp, truth, Split::None)
            }
        };
        let (x0, y0, x1, y1) = ev_quadrant;
        let mut image_ref = format!(
            "toy:aimg={answer_img};aprior={answer_prior};bimg={beta_img};bprior={beta_prior};ev={x0},{y0},{x1},{y1}"
        );
        if let Some((fx0, fy0, fx1, fy1)) = focus_quadrant {
            image_ref.push_str(&format!(";af={fx0},{fy0},{fx1},{fy1}"));
        }
        if spec.attn_jitter > 0.0 {
            image_ref.push_str(&format!(";jitter={}", spec.attn_jitter));
        }

        let sample_id = format!("{}-{i:04}", spec.dataset_name);
        let question = format!("what does the marked region of image {i} show?");
        let trace = labeler.generate(&image_ref, &question, &Decoding::Greedy, 1)?;
        let answered = trace.tokens[0];
        let label = if answered == truth {
            Label::Correct
        } else {
            Label::Hallucinated
        };
        records.push(EvalRecord {
            sample_id,
            question,
            image_ref,
            response: None,
            label,
            judgments: None,
            split,
            dataset: spec.dataset_name.clone(),
            evidence_regions: Some(vec![BoundingBox::new(x0, y0, x1, y1)?]),
        });
    }
    Ok(records)
}
