//! The eight comparison self-evaluation scores, all reported under the
//! shared orientation (higher = more likely hallucinated). Similarity-style
//! scores (verbalized confidence, visual-attention ratio, contextual lens)
//! are negated here so that convention holds.

use nalgebra::DMatrix;

use crate::backend::{Backend, GenerationTrace, StepStats};
use crate::error::{Error, Result};

/// Default ridge added to the response-embedding covariance.
pub const DEFAULT_EIGEN_RIDGE: f64 = 1e-3;

/// Default layer range for the summed visual attention ratio.
pub const DEFAULT_SVAR_BAND: (usize, usize) = (5, 18);

/// A score value plus an optional quality flag (parse failure, degenerate
/// geometry). Flags propagate into report rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreOutcome {
    pub value: f64,
    pub flag: Option<String>,
}

impl ScoreOutcome {
    fn clean(value: f64) -> Self {
        Self { value, flag: None }
    }
}

// ---------------------------------------------------------------------------
// Logit-based
// ---------------------------------------------------------------------------

/// Exponentiated average negative log-likelihood of the realized response.
pub fn perplexity(steps: &[StepStats]) -> Result<f64> {
    if steps.is_empty() {
        return Err(Error::EmptySteps);
    }
    let mean_nll = -steps.iter().map(|s| s.logprob_realized).sum::<f64>() / steps.len() as f64;
    Ok(mean_nll.exp())
}

// ---------------------------------------------------------------------------
// Prompting-based
// ---------------------------------------------------------------------------

/// The confidence-elicitation prompt issued for a question/answer pair.
pub fn verbalized_prompt(question: &str, answer: &str) -> String {
    format!(
        "Question: {question}. \nModel answer: {answer}. \nOn a scale of 0 to 100, how confident are you about the correctness of this answer? Respond with only a single number."
    )
}

/// First integer token in `[0, 100]` found in a reply.
pub fn parse_confidence_reply(reply: &str) -> Option<u32> {
    let mut chars = reply.char_indices().peekable();
    while let Some((start, c)) = chars.next() {
        if !c.is_ascii_digit() {
            continue;
        }
        let mut end = start + c.len_utf8();
        while let Some(&(i, d)) = chars.peek() {
            if d.is_ascii_digit() {
                end = i + d.len_utf8();
                chars.next();
            } else {
                break;
            }
        }
        if let Ok(v) = reply[start..end].parse::<u32>() {
            if v <= 100 {
                return Some(v);
            }
        }
    }
    None
}

/// Issues the confidence prompt and scores the parsed self-reported
/// confidence, negated. An unparseable reply falls back to 0.5 confidence
/// with a parse-failure flag.
pub fn verbalized_confidence(
    backend: &mut dyn Backend,
    image_ref: &str,
    question: &str,
    answer: &str,
) -> Result<ScoreOutcome> {
    let prompt = verbalized_prompt(question, answer);
    let reply = backend.query_text(image_ref, &prompt)?;
    Ok(score_confidence_reply(&reply))
}

/// Pure scoring half of the verbalized-confidence baseline, split out so the
/// reply can come from a cache.
pub fn score_confidence_reply(reply: &str) -> ScoreOutcome {
    match parse_confidence_reply(reply) {
        Some(c) => ScoreOutcome::clean(-(c as f64) / 100.0),
        None => ScoreOutcome {
            value: -0.5,
            flag: Some(format!("unparseable confidence reply {reply:?}")),
        },
    }
}

// ---------------------------------------------------------------------------
// Attention-based
// ---------------------------------------------------------------------------

/// Summed visual attention ratio: per generated token, visual attention mass
/// summed over the layer range and averaged over heads; the final score is
/// the mean over tokens, negated.
pub fn svar(trace: &GenerationTrace, layer_range: (usize, usize)) -> Result<f64> {
    let (ls, le) = layer_range;
    let att = &trace.attention;
    if ls > le || le >= att.n_layers() {
        return Err(Error::BandOutsideExported(ls, le, att.n_layers()));
    }
    let m = att.n_queries();
    if m == 0 {
        return Err(Error::DegenerateSample("no generated tokens".into()));
    }
    let h = att.n_heads() as f64;
    let mut total = 0.0f64;
    for query in 0..m {
        let mut var = 0.0f64;
        for layer in ls..=le {
            for head in 0..att.n_heads() {
                var += att
                    .visual_row(layer, head, query)
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>();
            }
        }
        total += var / h;
    }
    Ok(-(total / m as f64))
}

// ---------------------------------------------------------------------------
// Hidden-state-based
// ---------------------------------------------------------------------------

fn mean_generated_vector(trace: &GenerationTrace, layer: usize) -> Result<Vec<f64>> {
    let m = trace.n_generated();
    if m == 0 {
        return Err(Error::DegenerateSample("no generated tokens".into()));
    }
    let dim = trace.hidden.dim;
    let mut mean = vec![0.0f64; dim];
    for j in 0..m {
        let row = trace
            .hidden
            .generated_row(layer, j)
            .ok_or(Error::LayerUnavailable(layer))?;
        for (acc, &v) in mean.iter_mut().zip(row) {
            *acc += v as f64;
        }
    }
    for v in &mut mean {
        *v /= m as f64;
    }
    Ok(mean)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Maximum cosine similarity between the mean generated-token representation
/// at `text_layer` and any visual token representation at `image_layer`,
/// negated. A zero-norm mean vector is flagged and scored 0.
pub fn contextual_lens(
    trace: &GenerationTrace,
    text_layer: usize,
    image_layer: usize,
) -> Result<ScoreOutcome> {
    let mean = mean_generated_vector(trace, text_layer)?;
    let n_visual = trace
        .hidden
        .n_visual(image_layer)
        .ok_or(Error::LayerUnavailable(image_layer))?;
    if norm(&mean) == 0.0 {
        return Ok(ScoreOutcome {
            value: 0.0,
            flag: Some("zero-norm mean text vector".into()),
        });
    }
    let mut best = f64::NEG_INFINITY;
    for i in 0..n_visual {
        let row = trace
            .hidden
            .visual_row(image_layer, i)
            .ok_or(Error::LayerUnavailable(image_layer))?;
        let v: Vec<f64> = row.iter().map(|&x| x as f64).collect();
        best = best.max(cosine(&mean, &v));
    }
    if best == f64::NEG_INFINITY {
        return Err(Error::InvalidTrace("no visual positions exported".into()));
    }
    Ok(ScoreOutcome::clean(-best))
}

/// Aggregates layer-wise changes between adjacent mean hidden states: the
/// Euclidean step length minus the angular step, averaged over layer pairs.
/// A zero-norm neighbor contributes no angle term.
pub fn chain_of_embeddings(trace: &GenerationTrace) -> Result<f64> {
    let layers: Vec<usize> = trace.hidden.layers.keys().copied().collect();
    if layers.len() < 2 {
        return Err(Error::InsufficientLayers(layers.len()));
    }
    let means: Vec<Vec<f64>> = layers
        .iter()
        .map(|&l| mean_generated_vector(trace, l))
        .collect::<Result<_>>()?;
    let mut total = 0.0f64;
    for pair in means.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        let delta: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (y - x) * (y - x))
            .sum::<f64>()
            .sqrt();
        // identical vectors subtend an exactly zero angle; going through
        // acos(cos) would amplify round-off there
        let angle = if delta == 0.0 || norm(a) == 0.0 || norm(b) == 0.0 {
            0.0
        } else {
            cosine(a, b).clamp(-1.0, 1.0).acos()
        };
        total += delta - angle;
    }
    Ok(total / (means.len() - 1) as f64)
}

// ---------------------------------------------------------------------------
// Consistency-based
// ---------------------------------------------------------------------------

/// Multiple sampled responses for one (image, prompt) pair: plain-text
/// renderings, per-response embeddings (mean generated-token hidden state at
/// one layer), and per-response sequence probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub texts: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
    pub probs: Option<Vec<f64>>,
}

impl SampleSet {
    /// Builds a set from sampled traces. `embed_layer` selects the hidden
    /// layer for embeddings; sequence probability is the product of realized
    /// step probabilities.
    pub fn from_traces(
        traces: &[GenerationTrace],
        texts: Vec<String>,
        embed_layer: usize,
    ) -> Result<Self> {
        if traces.len() != texts.len() {
            return Err(Error::LengthMismatch(traces.len(), texts.len()));
        }
        if traces.is_empty() {
            return Err(Error::TooFewResponses { need: 1, got: 0 });
        }
        let mut embeddings = Vec::with_capacity(traces.len());
        let mut probs = Vec::with_capacity(traces.len());
        let dim = traces[0].hidden.dim;
        for trace in traces {
            if trace.hidden.dim != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: trace.hidden.dim,
                });
            }
            embeddings.push(mean_generated_vector(trace, embed_layer)?);
            probs.push(
                trace
                    .steps
                    .iter()
                    .map(|s| s.logprob_realized)
                    .sum::<f64>()
                    .exp(),
            );
        }
        Ok(Self {
            texts,
            embeddings,
            probs: Some(probs),
        })
    }
}

/// Average log-determinant of the ridge-regularized covariance of centered
/// response embeddings: `(1/K) * sum_i log(lambda_i)` over the eigenvalues
/// of `C = (1/K) Z^T Z + ridge * I`.
pub fn eigenscore(set: &SampleSet, ridge: f64) -> Result<f64> {
    let k = set.embeddings.len();
    if k < 2 {
        return Err(Error::TooFewResponses { need: 2, got: k });
    }
    let d = set.embeddings[0].len();
    for e in &set.embeddings {
        if e.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: e.len(),
            });
        }
    }
    let mut mean = vec![0.0f64; d];
    for e in &set.embeddings {
        for (m, &v) in mean.iter_mut().zip(e) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= k as f64;
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for e in &set.embeddings {
        let centered: Vec<f64> = e.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for a in 0..d {
            for b in 0..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    cov /= k as f64;
    for a in 0..d {
        cov[(a, a)] += ridge;
    }
    let eigenvalues = cov.symmetric_eigen().eigenvalues;
    // The covariance is PSD by construction; tiny negative eigenvalues are
    // round-off and clamp to zero (log 0 = -inf is the honest degenerate).
    let log_sum: f64 = eigenvalues.iter().map(|&l| l.max(0.0).ln()).sum();
    Ok(log_sum / k as f64)
}

/// Semantic equivalence between two response texts. Implementations must be
/// symmetric; clustering checks both directions and hard-errors on
/// disagreement.
pub trait EquivalenceOracle {
    fn equivalent(&self, a: &str, b: &str) -> bool;
}

/// Case-folded, punctuation-stripped, article-stripped exact match.
pub struct NormalizedMatch;

/// Normalization used by [`NormalizedMatch`].
pub fn normalize_response(text: &str) -> String {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

impl EquivalenceOracle for NormalizedMatch {
    fn equivalent(&self, a: &str, b: &str) -> bool {
        normalize_response(a) == normalize_response(b)
    }
}

/// Greedy clustering against each cluster's first member, with a symmetry
/// check on every tested pair. The result is a partition: every response
/// index appears in exactly one cluster.
pub fn cluster_responses(
    texts: &[String],
    oracle: &dyn EquivalenceOracle,
) -> Result<Vec<Vec<usize>>> {
    let mut clusters: Vec<Vec<usize>> = Vec::new();
    for (i, text) in texts.iter().enumerate() {
        let mut assigned = false;
        for cluster in clusters.iter_mut() {
            let rep_text = &texts[cluster[0]];
            let forward = oracle.equivalent(text, rep_text);
            let backward = oracle.equivalent(rep_text, text);
            if forward != backward {
                return Err(Error::AsymmetricEquivalence(text.clone(), rep_text.clone()));
            }
            if forward {
                cluster.push(i);
                assigned = true;
                break;
            }
        }
        if !assigned {
            clusters.push(vec![i]);
        }
    }
    Ok(clusters)
}

/// Groups responses into equivalence clusters and returns the entropy of the
/// induced distribution over clusters, weighting each response by its
/// sequence probability (uniform when probabilities are unavailable).
pub fn semantic_entropy(set: &SampleSet, oracle: &dyn EquivalenceOracle) -> Result<f64> {
    let k = set.texts.len();
    if k == 0 {
        return Err(Error::TooFewResponses { need: 1, got: 0 });
    }
    let weights: Vec<f64> = match &set.probs {
        Some(p) if p.len() == k && p.iter().sum::<f64>() > 0.0 => p.clone(),
        _ => vec![1.0; k],
    };
    let clusters = cluster_responses(&set.texts, oracle)?;
    let cluster_weights: Vec<f64> = clusters
        .iter()
        .map(|members| members.iter().map(|&i| weights[i]).sum())
        .collect();
    let total: f64 = cluster_weights.iter().sum();
    let entropy = -cluster_weights
        .iter()
        .map(|w| w / total)
        .filter(|&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>();
    Ok(entropy.max(0.0))
}
