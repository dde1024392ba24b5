//! `eval`: AUROC summaries against labels, hyperparameter sweeps, transfer,
//! timing, and the per-layer attention profile.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use vauq::backend::{Backend, TraceCache};
use vauq::eval::{
    auroc, load_dataset, sweep, timing_report, transfer, EvalRecord, ScoreFamily, Split,
    SweepOutcome,
};
use vauq::pipeline::{cached_generate, score_dataset, ScoringConfig};
use vauq::report::ScoreName;
use vauq::saliency::layer_ratio_curve;

use crate::config::{write_effective_config, Overrides, RunConfig};
use crate::{config_err, data_err, CliResult};

#[derive(Debug, clap::Args)]
pub struct EvalArgs {
    /// Run configuration file (JSON).
    #[arg(long, short)]
    pub config: PathBuf,

    #[command(flatten)]
    pub overrides: Overrides,

    /// Sweep (alpha, K, band) and export the AUROC surface.
    #[arg(long)]
    pub sweep: bool,

    /// Source dataset for hyperparameter transfer (requires
    /// --transfer-target).
    #[arg(long)]
    pub transfer_source: Option<PathBuf>,

    /// Target dataset for hyperparameter transfer.
    #[arg(long)]
    pub transfer_target: Option<PathBuf>,

    /// Per-score wall-time and forward-pass report.
    #[arg(long)]
    pub timing: bool,

    /// Per-layer evidence/irrelevant attention profile (needs evidence
    /// regions).
    #[arg(long)]
    pub attn_curve: bool,
}

fn load_labeled(path: &Path) -> CliResult<Vec<EvalRecord>> {
    let load = load_dataset(path)?;
    if !load.malformed.is_empty() {
        log::warn!(
            "{} malformed lines skipped in {}",
            load.malformed.len(),
            path.display()
        );
    }
    let labeled = load
        .records
        .iter()
        .filter(|r| r.label.as_positive().is_some())
        .count();
    if labeled == 0 {
        return Err(data_err(format!(
            "dataset {} carries no labels; refusing to evaluate",
            path.display()
        )));
    }
    Ok(load.records)
}

pub fn run(config: &RunConfig, args: &EvalArgs) -> CliResult<()> {
    let scores = config.score_names()?;
    if let Some(unimplemented) = scores.iter().find(|s| !s.is_implemented()) {
        return Err(config_err(format!(
            "score {unimplemented} cannot be evaluated: not implemented"
        )));
    }
    if args.transfer_source.is_some() != args.transfer_target.is_some() {
        return Err(config_err(
            "--transfer-source and --transfer-target must be given together".into(),
        ));
    }
    let backend = config.backend.build()?;
    let cache = TraceCache::new(config.resolved_cache_dir())?;
    let records = load_labeled(&config.dataset)?;
    write_effective_config(config)?;

    summary_report(config, backend.as_ref(), &cache, &records, &scores)?;

    if args.sweep {
        sweep_report(config, backend.as_ref(), &cache)?;
    }
    if let (Some(source), Some(target)) = (&args.transfer_source, &args.transfer_target) {
        transfer_report(config, backend.as_ref(), &cache, source, target)?;
    }
    if args.timing {
        timing_csv(config, backend.as_ref(), &records, &scores)?;
    }
    if args.attn_curve {
        attention_curve(config, backend.as_ref(), &cache, &records)?;
    }
    Ok(())
}

fn write_csv(path: &Path, header: &str, lines: &[String]) -> CliResult<()> {
    let mut out = String::from(header);
    out.push('\n');
    for line in lines {
        out.push_str(line);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| data_err(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn split_tag(split: Split) -> &'static str {
    match split {
        Split::Factual => "factual",
        Split::Counterfactual => "counterfactual",
        Split::None => "none",
    }
}

/// One AUROC row per score x split x seed, plus mean rows over seeds.
fn summary_report(
    config: &RunConfig,
    backend: &dyn Backend,
    cache: &TraceCache,
    records: &[EvalRecord],
    scores: &[ScoreName],
) -> CliResult<()> {
    let dataset_name = records
        .first()
        .map(|r| r.dataset.clone())
        .unwrap_or_else(|| "dataset".into());
    let mut splits = vec![None];
    if records.iter().any(|r| r.split != Split::None) {
        splits.push(Some(Split::Factual));
        splits.push(Some(Split::Counterfactual));
    }

    let mut lines = Vec::new();
    let mut by_key: BTreeMap<(ScoreName, String), Vec<f64>> = BTreeMap::new();
    for &seed in &config.seeds {
        let scoring = ScoringConfig {
            seed,
            ..config.scoring.clone()
        };
        let results = score_dataset(backend, Some(cache), &scoring, records, scores, config.jobs)?;
        let skipped = results.iter().filter(|s| s.rows.is_empty()).count();
        if skipped > 0 {
            log::warn!("{skipped} samples produced no scores at seed {seed}");
        }
        let mut values: HashMap<(ScoreName, &str), f64> = HashMap::new();
        for row in results.iter().flat_map(|s| &s.rows) {
            values.insert((row.score_name, row.sample_id.as_str()), row.value);
        }
        for &score in scores {
            for &split in &splits {
                let mut s = Vec::new();
                let mut l = Vec::new();
                for record in records {
                    if split.is_some_and(|want| record.split != want) {
                        continue;
                    }
                    let (Some(&v), Some(label)) = (
                        values.get(&(score, record.sample_id.as_str())),
                        record.label.as_positive(),
                    ) else {
                        continue;
                    };
                    s.push(v);
                    l.push(label);
                }
                let value = auroc(&s, &l)?;
                let split_name = split.map_or("all", split_tag);
                lines.push(format!(
                    "{dataset_name},{score},{split_name},{seed},{value}"
                ));
                by_key
                    .entry((score, split_name.to_string()))
                    .or_default()
                    .push(value);
            }
        }
    }
    for ((score, split_name), values) in by_key {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        lines.push(format!("{dataset_name},{score},{split_name},mean,{mean}"));
    }
    write_csv(
        &config.output_dir.join("auroc_summary.csv"),
        "dataset,score,split,seed,auroc",
        &lines,
    )
}

fn band_tag(band: Option<(usize, usize)>) -> String {
    band.map_or(String::new(), |(s, e)| format!("{s}-{e}"))
}

fn surface_lines(outcome: &SweepOutcome) -> Vec<String> {
    let mut lines = Vec::new();
    for cell in &outcome.cells {
        let alpha = cell.alpha.map_or(String::new(), |a| a.to_string());
        let k = cell.k.map_or(String::new(), |k| k.to_string());
        let band = band_tag(cell.band);
        lines.push(format!("{alpha},{k},{band},validation,{}", cell.val_auroc));
        lines.push(format!("{alpha},{k},{band},test,{}", cell.test_auroc));
    }
    lines
}

fn sweep_report(config: &RunConfig, backend: &dyn Backend, cache: &TraceCache) -> CliResult<()> {
    let records = load_labeled(&config.dataset)?;
    let mut best_lines = Vec::new();
    for &seed in &config.seeds {
        let mut grid = config.sweep_grid();
        grid.seed = seed;
        let outcome = sweep(
            backend,
            Some(cache),
            &config.scoring,
            &records,
            &grid,
            ScoreFamily::Vauq,
        )?;
        write_csv(
            &config.output_dir.join(format!("sweep_surface_seed{seed}.csv")),
            "alpha,k,band,split,auroc",
            &surface_lines(&outcome),
        )?;
        best_lines.push(format!(
            "{seed},{},{},{},{},{}",
            outcome.best.alpha,
            outcome.best.k_percent,
            band_tag(Some(outcome.best.layer_band)),
            outcome.val_auroc,
            outcome.test_auroc
        ));
    }
    write_csv(
        &config.output_dir.join("sweep_best.csv"),
        "seed,alpha,k_percent,band,val_auroc,test_auroc",
        &best_lines,
    )
}

fn transfer_report(
    config: &RunConfig,
    backend: &dyn Backend,
    cache: &TraceCache,
    source: &Path,
    target: &Path,
) -> CliResult<()> {
    let source_records = load_labeled(source)?;
    let target_records = load_labeled(target)?;
    let mut lines = Vec::new();
    for &seed in &config.seeds {
        let mut grid = config.sweep_grid();
        grid.seed = seed;
        let outcome = transfer(
            backend,
            Some(cache),
            &config.scoring,
            &source_records,
            &target_records,
            &grid,
        )?;
        lines.push(format!(
            "{seed},{},{},{},{},{},{}",
            outcome.source_params.alpha,
            outcome.source_params.k_percent,
            band_tag(Some(outcome.source_params.layer_band)),
            outcome.transferred_auroc,
            outcome.tuned_auroc,
            outcome.gap
        ));
    }
    write_csv(
        &config.output_dir.join("transfer.csv"),
        "seed,src_alpha,src_k_percent,src_band,transferred_auroc,tuned_auroc,gap",
        &lines,
    )
}

fn timing_csv(
    config: &RunConfig,
    backend: &dyn Backend,
    records: &[EvalRecord],
    scores: &[ScoreName],
) -> CliResult<()> {
    let scoring = ScoringConfig {
        seed: config.seeds[0],
        ..config.scoring.clone()
    };
    let rows = timing_report(backend, &scoring, records, scores)?;
    let lines: Vec<String> = rows
        .iter()
        .map(|r| {
            format!(
                "{},{},{},{},{},{},{}",
                r.score,
                r.samples,
                r.mean_seconds,
                r.std_seconds,
                r.generate_passes_per_sample,
                r.rescore_passes_per_sample,
                r.text_queries_per_sample
            )
        })
        .collect();
    write_csv(
        &config.output_dir.join("timing.csv"),
        "score,samples,mean_seconds,std_seconds,generate_passes,rescore_passes,text_queries",
        &lines,
    )
}

/// Mean per-layer evidence/irrelevant attention over samples that carry
/// evidence regions.
fn attention_curve(
    config: &RunConfig,
    backend: &dyn Backend,
    cache: &TraceCache,
    records: &[EvalRecord],
) -> CliResult<()> {
    let mut worker = backend.fork();
    let mut sums: Vec<(f64, f64)> = Vec::new();
    let mut n = 0usize;
    for record in records.iter().filter(|r| r.evidence_regions.is_some()) {
        let layout = worker
            .layout(&record.image_ref)?
            .with_evidence(record.evidence_regions.clone().unwrap_or_default());
        let trace = cached_generate(
            worker.as_mut(),
            Some(cache),
            &config.scoring.decoding,
            &record.image_ref,
            &record.question,
            config.scoring.max_tokens,
        )?;
        if trace.is_degenerate() {
            continue;
        }
        let curve = layer_ratio_curve(&trace, &layout)?;
        if sums.is_empty() {
            sums = vec![(0.0, 0.0); curve.len()];
        }
        for (layer, inside, outside) in curve {
            sums[layer].0 += inside;
            sums[layer].1 += outside;
        }
        n += 1;
    }
    if n == 0 {
        return Err(data_err(
            "no records with evidence regions; cannot build the attention profile".into(),
        ));
    }
    let lines: Vec<String> = sums
        .iter()
        .enumerate()
        .map(|(layer, (i, o))| format!("{layer},{},{}", i / n as f64, o / n as f64))
        .collect();
    write_csv(
        &config.output_dir.join("attn_layers.csv"),
        "layer,mean_inside,mean_outside",
        &lines,
    )
}
