//! `score`: run generation, rescoring and scoring over a dataset and write
//! the per-sample reports.

use serde::Serialize;
use vauq::backend::TraceCache;
use vauq::eval::load_dataset;
use vauq::pipeline::{score_dataset, SampleScores, SampleStatus, ScoreError};
use vauq::report::{summarize, write_jsonl, write_summary_csv};
use vauq::saliency::MaskRecord;

use crate::config::{write_effective_config, RunConfig};
use crate::{data_err, CliResult};

#[derive(Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ManifestEntry<'a> {
    MalformedLine {
        line: usize,
        detail: &'a str,
    },
    Sample {
        sample_id: &'a str,
        status: SampleStatus,
        errors: &'a [ScoreError],
    },
}

/// Fraction of malformed dataset lines above which the run fails.
const MALFORMED_TOLERANCE: f64 = 0.10;

pub fn run(config: &RunConfig) -> CliResult<()> {
    let scores = config.score_names()?;
    let backend = config.backend.build()?;
    let cache = TraceCache::new(config.resolved_cache_dir())?;
    let load = load_dataset(&config.dataset)?;
    write_effective_config(config)?;

    if load.total_lines == 0 {
        return Err(data_err(format!(
            "dataset {} is empty",
            config.dataset.display()
        )));
    }
    let frac = load.malformed.len() as f64 / load.total_lines as f64;
    if frac > MALFORMED_TOLERANCE {
        write_manifest(config, &load.malformed, &[])?;
        return Err(data_err(format!(
            "{} of {} dataset lines malformed (> {:.0}% tolerance); see manifest.jsonl",
            load.malformed.len(),
            load.total_lines,
            MALFORMED_TOLERANCE * 100.0
        )));
    }

    let results = score_dataset(
        backend.as_ref(),
        Some(&cache),
        &config.scoring,
        &load.records,
        &scores,
        config.jobs,
    )?;
    write_reports(config, &results)?;
    write_manifest(config, &load.malformed, &results)?;

    let counts = backend.pass_counts();
    eprintln!(
        "scored {} samples ({} malformed lines skipped); backend passes: generate={} rescore={} text_queries={}",
        results.len(),
        load.malformed.len(),
        counts.generate,
        counts.rescore,
        counts.text_queries
    );

    let failed = results
        .iter()
        .filter(|s| s.status == SampleStatus::Failed || !s.errors.is_empty())
        .count();
    if failed > 0 {
        return Err(crate::CliError {
            code: 3,
            message: format!("{failed} samples failed to score; see manifest.jsonl"),
        });
    }
    Ok(())
}

fn write_reports(config: &RunConfig, results: &[SampleScores]) -> CliResult<()> {
    let mut rows: Vec<_> = results.iter().flat_map(|s| s.rows.clone()).collect();
    rows.sort_by(|a, b| {
        a.sample_id
            .cmp(&b.sample_id)
            .then(a.score_name.cmp(&b.score_name))
    });
    write_jsonl(&config.output_dir.join("scores.jsonl"), &rows)?;
    write_summary_csv(&config.output_dir.join("summary.csv"), &summarize(&rows))?;

    let mut masks: Vec<&MaskRecord> = results.iter().flat_map(|s| &s.masks).collect();
    masks.sort_by(|a, b| a.sample_id.cmp(&b.sample_id).then(a.kind.cmp(&b.kind)));
    write_jsonl(&config.output_dir.join("masks.jsonl"), &masks)?;
    Ok(())
}

fn write_manifest(
    config: &RunConfig,
    malformed: &[vauq::eval::MalformedLine],
    results: &[SampleScores],
) -> CliResult<()> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    for m in malformed {
        entries.push(ManifestEntry::MalformedLine {
            line: m.line,
            detail: &m.detail,
        });
    }
    for s in results {
        entries.push(ManifestEntry::Sample {
            sample_id: &s.sample_id,
            status: s.status,
            errors: &s.errors,
        });
    }
    write_jsonl(&config.output_dir.join("manifest.jsonl"), &entries)?;
    Ok(())
}
