//! Rank-based AUROC with midranks for ties.

use crate::error::{Error, Result};

/// Area under the ROC curve via the rank-sum statistic, with tied scores
/// receiving midranks (half credit per tied positive-negative pair). The
/// positive class is label 1 (hallucinated). Errors when only one class is
/// present.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch(scores.len(), labels.len()));
    }
    if scores.is_empty() {
        return Err(Error::UndefinedAuroc("empty input".into()));
    }
    for &l in labels {
        if l > 1 {
            return Err(Error::UndefinedAuroc(format!("label {l} is not 0 or 1")));
        }
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedAuroc("NaN score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuroc(
            "both classes must be present".into(),
        ));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // midranks over tie groups, 1-based
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += midrank;
            }
        }
        i = j + 1;
    }

    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}
