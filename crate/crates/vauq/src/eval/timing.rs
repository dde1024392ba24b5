//! Per-score inference-cost accounting: wall time and forward-pass counts.
//!
//! Timing runs bypass the trace cache so every pass is actually executed,
//! and pass counts are read from the backend's own counters rather than
//! assumed, so the report survives pipeline refactors.

use std::time::Instant;

use serde::Serialize;

use crate::backend::Backend;
use crate::error::Result;
use crate::eval::EvalRecord;
use crate::pipeline::{score_record, ScoringConfig};
use crate::report::ScoreName;

/// Cost profile of one scoring method over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TimingRow {
    pub score: ScoreName,
    pub samples: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    /// Mean backend passes per sample, measured by the backend counters.
    pub generate_passes_per_sample: f64,
    pub rescore_passes_per_sample: f64,
    pub text_queries_per_sample: f64,
}

/// Times each scoring method separately over the dataset. Every method pays
/// its own full cost: no cache, no sharing across methods.
pub fn timing_report(
    backend: &dyn Backend,
    cfg: &ScoringConfig,
    records: &[EvalRecord],
    scores: &[ScoreName],
) -> Result<Vec<TimingRow>> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(scores.len());
    for &score in scores {
        let mut worker = backend.fork();
        let before = worker.pass_counts();
        let mut durations = Vec::with_capacity(records.len());
        for record in records {
            let started = Instant::now();
            let _ = score_record(worker.as_mut(), None, cfg, record, &[score]);
            durations.push(started.elapsed().as_secs_f64());
        }
        let after = worker.pass_counts().since(before);
        let n = records.len().max(1) as f64;
        let mean = durations.iter().sum::<f64>() / n;
        let var = durations.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n;
        rows.push(TimingRow {
            score,
            samples: records.len(),
            mean_seconds: mean,
            std_seconds: var.sqrt(),
            generate_passes_per_sample: after.generate as f64 / n,
            rescore_passes_per_sample: after.rescore as f64 / n,
            text_queries_per_sample: after.text_queries as f64 / n,
        });
    }
    Ok(rows)
}
