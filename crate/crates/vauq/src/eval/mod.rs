//! Dataset ingestion, judge-label aggregation, AUROC, hyperparameter sweeps,
//! cross-dataset transfer, and timing: the harness side of the library.

mod auroc;
mod sweep;
mod timing;

pub use auroc::auroc;
pub use sweep::{sweep, transfer, ScoreFamily, SweepCell, SweepGrid, SweepOutcome, TransferOutcome};
pub use timing::{timing_report, TimingRow};

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backend::BoundingBox;
use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Labels and records
// ---------------------------------------------------------------------------

/// Ground-truth correctness of a response. Serialized as `0` (correct),
/// `1` (hallucinated) or the string `"unlabeled"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(into = "LabelRepr", try_from = "LabelRepr")]
pub enum Label {
    Correct,
    Hallucinated,
    #[default]
    Unlabeled,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LabelRepr {
    Num(u8),
    Text(String),
}

impl From<Label> for LabelRepr {
    fn from(l: Label) -> Self {
        match l {
            Label::Correct => LabelRepr::Num(0),
            Label::Hallucinated => LabelRepr::Num(1),
            Label::Unlabeled => LabelRepr::Text("unlabeled".into()),
        }
    }
}

impl TryFrom<LabelRepr> for Label {
    type Error = String;

    fn try_from(r: LabelRepr) -> std::result::Result<Self, String> {
        match r {
            LabelRepr::Num(0) => Ok(Label::Correct),
            LabelRepr::Num(1) => Ok(Label::Hallucinated),
            LabelRepr::Num(other) => Err(format!("label {other} is not 0 or 1")),
            LabelRepr::Text(s) if s == "unlabeled" => Ok(Label::Unlabeled),
            LabelRepr::Text(s) => Err(format!("label {s:?} is not 0, 1 or \"unlabeled\"")),
        }
    }
}

impl Label {
    /// 1 for hallucinated (the positive class), 0 for correct.
    pub fn as_positive(&self) -> Option<u8> {
        match self {
            Label::Correct => Some(0),
            Label::Hallucinated => Some(1),
            Label::Unlabeled => None,
        }
    }
}

/// Dataset partition tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Factual,
    Counterfactual,
    #[default]
    None,
}

/// Response text plus the token ids that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct ResponseRecord {
    #[serde(default)]
    pub text: String,
    #[serde(default)]
    pub tokens: Vec<u32>,
}

/// One dataset row. Datasets are line-delimited JSON, one record per line,
/// with evidence boxes as `[x0, y0, x1, y1]` in normalized coordinates.
/// A record may carry raw judge verdicts instead of a label; the loader
/// aggregates them by majority vote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub sample_id: String,
    #[serde(default)]
    pub question: String,
    pub image_ref: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub response: Option<ResponseRecord>,
    #[serde(default)]
    pub label: Label,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub judgments: Option<Vec<String>>,
    #[serde(default)]
    pub split: Split,
    pub dataset: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence_regions: Option<Vec<BoundingBox>>,
}

// ---------------------------------------------------------------------------
// Judge-verdict ingestion
// ---------------------------------------------------------------------------

/// Result of aggregating raw judge verdicts for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct JudgmentOutcome {
    pub label: Label,
    /// Verdicts that parsed as neither correct nor wrong.
    pub malformed: usize,
    /// Why the sample stayed unlabeled, when it did.
    pub reason: Option<String>,
}

fn parse_verdict(raw: &str) -> Option<bool> {
    // keep letters only, so "Correct." and " WRONG " both parse
    let word: String = raw
        .chars()
        .filter(|c| c.is_alphabetic())
        .flat_map(|c| c.to_lowercase())
        .collect();
    match word.as_str() {
        "correct" => Some(false),
        "wrong" => Some(true),
        _ => None,
    }
}

/// Majority vote over judge verdicts, parsed case-insensitively to
/// correct/wrong. An exact tie or an all-unparseable list stays unlabeled
/// with a reason; the vote is order-invariant.
pub fn ingest_judgments<S: AsRef<str>>(verdicts: &[S]) -> JudgmentOutcome {
    if verdicts.is_empty() {
        return JudgmentOutcome {
            label: Label::Unlabeled,
            malformed: 0,
            reason: Some("no verdicts".into()),
        };
    }
    let mut wrong = 0usize;
    let mut correct = 0usize;
    let mut malformed = 0usize;
    for v in verdicts {
        match parse_verdict(v.as_ref()) {
            Some(true) => wrong += 1,
            Some(false) => correct += 1,
            None => malformed += 1,
        }
    }
    let (label, reason) = if correct == 0 && wrong == 0 {
        (Label::Unlabeled, Some("all verdicts unparseable".to_string()))
    } else if correct == wrong {
        (Label::Unlabeled, Some(format!("tie at {correct}-{wrong}")))
    } else if wrong > correct {
        (Label::Hallucinated, None)
    } else {
        (Label::Correct, None)
    };
    JudgmentOutcome {
        label,
        malformed,
        reason,
    }
}

// ---------------------------------------------------------------------------
// Dataset loading
// ---------------------------------------------------------------------------

/// A dataset line that failed to parse; kept for the error manifest.
#[derive(Debug, Clone, Serialize)]
pub struct MalformedLine {
    pub line: usize,
    pub detail: String,
}

/// Loaded dataset plus its parse casualties. `total_lines` counts non-empty
/// lines, so callers can apply a malformed-fraction policy.
#[derive(Debug, Clone)]
pub struct DatasetLoad {
    pub records: Vec<EvalRecord>,
    pub malformed: Vec<MalformedLine>,
    pub total_lines: usize,
}

/// Reads a line-delimited dataset, skipping malformed lines (they are
/// returned, not dropped silently). Records without an explicit label but
/// with raw judgments get the majority-vote label. Duplicate sample ids are
/// malformed.
pub fn load_dataset(path: &Path) -> Result<DatasetLoad> {
    let file = std::fs::File::open(path).map_err(|e| {
        Error::Dataset(format!("cannot open {}: {e}", path.display()))
    })?;
    let reader = std::io::BufReader::new(file);
    let mut records: Vec<EvalRecord> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    let mut malformed = Vec::new();
    let mut total_lines = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        total_lines += 1;
        match serde_json::from_str::<EvalRecord>(&line) {
            Ok(mut record) => {
                if !seen.insert(record.sample_id.clone()) {
                    malformed.push(MalformedLine {
                        line: line_no,
                        detail: format!("duplicate sample_id {:?}", record.sample_id),
                    });
                    continue;
                }
                if record.label == Label::Unlabeled {
                    if let Some(judgments) = &record.judgments {
                        let outcome = ingest_judgments(judgments);
                        record.label = outcome.label;
                        if let Some(reason) = outcome.reason {
                            log::warn!(
                                "sample {} stays unlabeled: {reason}",
                                record.sample_id
                            );
                        }
                    }
                }
                records.push(record);
            }
            Err(e) => malformed.push(MalformedLine {
                line: line_no,
                detail: e.to_string(),
            }),
        }
    }
    Ok(DatasetLoad {
        records,
        malformed,
        total_lines,
    })
}

/// Serializes records as line-delimited JSON.
pub fn write_dataset(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut out = String::new();
    for record in records {
        out.push_str(&serde_json::to_string(record)?);
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
