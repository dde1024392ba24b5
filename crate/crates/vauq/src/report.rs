//! Score report rows and file writers.
//!
//! Reports are line-delimited JSON plus a columnar summary. All floats go
//! through Rust's shortest round-trip formatting, so identical inputs
//! produce byte-identical files.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scores::ConditionEntropies;

/// Every score the harness knows how to report.
///
/// All values share one orientation: higher = more likely hallucinated.
/// The standalone image-information variants (`is_*`) are therefore reported
/// negated relative to the raw score, which natively grows with visual
/// grounding. `vl_uncertainty` is named but not implemented: it needs
/// external semantic perturbation of inputs and an entailment model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreName {
    Entropy,
    Perplexity,
    Verbalized,
    Svar,
    ContextualLens,
    ChainOfEmbeddings,
    #[serde(rename = "eigenscore")]
    EigenScore,
    SemanticEntropy,
    IsBlank,
    IsCore,
    IsRand,
    IsGt,
    Vauq,
    VauqBlank,
    VauqRand,
    VauqGt,
    VlUncertainty,
}

impl ScoreName {
    pub const ALL: [ScoreName; 17] = [
        ScoreName::Entropy,
        ScoreName::Perplexity,
        ScoreName::Verbalized,
        ScoreName::Svar,
        ScoreName::ContextualLens,
        ScoreName::ChainOfEmbeddings,
        ScoreName::EigenScore,
        ScoreName::SemanticEntropy,
        ScoreName::IsBlank,
        ScoreName::IsCore,
        ScoreName::IsRand,
        ScoreName::IsGt,
        ScoreName::Vauq,
        ScoreName::VauqBlank,
        ScoreName::VauqRand,
        ScoreName::VauqGt,
        ScoreName::VlUncertainty,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ScoreName::Entropy => "entropy",
            ScoreName::Perplexity => "perplexity",
            ScoreName::Verbalized => "verbalized",
            ScoreName::Svar => "svar",
            ScoreName::ContextualLens => "contextual_lens",
            ScoreName::ChainOfEmbeddings => "chain_of_embeddings",
            ScoreName::EigenScore => "eigenscore",
            ScoreName::SemanticEntropy => "semantic_entropy",
            ScoreName::IsBlank => "is_blank",
            ScoreName::IsCore => "is_core",
            ScoreName::IsRand => "is_rand",
            ScoreName::IsGt => "is_gt",
            ScoreName::Vauq => "vauq",
            ScoreName::VauqBlank => "vauq_blank",
            ScoreName::VauqRand => "vauq_rand",
            ScoreName::VauqGt => "vauq_gt",
            ScoreName::VlUncertainty => "vl_uncertainty",
        }
    }

    pub fn is_implemented(&self) -> bool {
        !matches!(self, ScoreName::VlUncertainty)
    }

    /// Scores whose dispersion over multiple sampled responses is the signal.
    pub fn is_dispersion(&self) -> bool {
        matches!(self, ScoreName::EigenScore | ScoreName::SemanticEntropy)
    }
}

impl fmt::Display for ScoreName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreName::ALL
            .iter()
            .find(|n| n.as_str() == s)
            .copied()
            .ok_or_else(|| Error::UnknownScore(s.to_string()))
    }
}

/// One report row: a single score value for a single sample, with the
/// provenance hash of every parameter that influenced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub sample_id: String,
    pub score_name: ScoreName,
    pub value: f64,
    pub params_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub condition_entropies: Option<ConditionEntropies>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

/// Short provenance hash over a canonical parameter string.
pub fn params_hash(canonical: &str) -> String {
    hex::encode(&Sha256::digest(canonical.as_bytes())[..6])
}

/// Per-score aggregate over report rows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub score_name: ScoreName,
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Aggregates rows per score name, in score-name order.
pub fn summarize(rows: &[ScoreRow]) -> Vec<SummaryRow> {
    let mut by_score: std::collections::BTreeMap<ScoreName, Vec<f64>> =
        std::collections::BTreeMap::new();
    for row in rows {
        by_score.entry(row.score_name).or_default().push(row.value);
    }
    by_score
        .into_iter()
        .map(|(score_name, values)| {
            let count = values.len();
            let mean = values.iter().sum::<f64>() / count as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
            SummaryRow {
                score_name,
                count,
                mean,
                std: var.sqrt(),
                min: values.iter().cloned().fold(f64::INFINITY, f64::min),
                max: values.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Writes items as line-delimited JSON.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Writes the per-score summary as CSV.
pub fn write_summary_csv(path: &Path, summary: &[SummaryRow]) -> Result<()> {
    let mut out = String::from("score_name,count,mean,std,min,max\n");
    for row in summary {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            row.score_name, row.count, row.mean, row.std, row.min, row.max
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
