//! Run configuration: a JSON file plus flag overrides. The effective
//! configuration is serialized verbatim into every output directory, and
//! re-running from that file reproduces the outputs bit-identically on the
//! toy backend.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use vauq::backend::{Backend, MaskKind, ToyBackend, ToyConfig};
use vauq::eval::SweepGrid;
use vauq::pipeline::ScoringConfig;
use vauq::report::ScoreName;

use crate::{config_err, CliError, CliResult};

/// Which model to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Toy {
        #[serde(default)]
        config: ToyConfig,
    },
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Toy {
            config: ToyConfig::default(),
        }
    }
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn Backend>, vauq::Error> {
        match self {
            BackendSpec::Toy { config } => Ok(Box::new(ToyBackend::new(config.clone())?)),
        }
    }
}

fn default_scores() -> Vec<String> {
    ["entropy", "perplexity", "is_core", "vauq"]
        .map(String::from)
        .to_vec()
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_jobs() -> usize {
    1
}

/// One reproducible run. Every field that influences an output lives here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub backend: BackendSpec,
    pub dataset: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_scores")]
    pub scores: Vec<String>,
    #[serde(default)]
    pub scoring: ScoringConfig,
    /// Grid for `eval --sweep`; defaults to the documented alpha/K ranges
    /// over the configured layer band.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepGrid>,
    /// Metric seeds; reports carry one row per seed plus a mean row.
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Trace cache directory. Falls back to `VAUQ_CACHE_DIR`, then to
    /// `<output_dir>/cache`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| config_err(format!("invalid config {}: {e}", path.display())))
    }

    pub fn score_names(&self) -> CliResult<Vec<ScoreName>> {
        if self.scores.is_empty() {
            return Err(config_err("score list is empty".into()));
        }
        self.scores
            .iter()
            .map(|s| ScoreName::from_str(s).map_err(|e| config_err(e.to_string())))
            .collect()
    }

    /// Cache directory: config, then environment, then under the output dir.
    pub fn resolved_cache_dir(&self) -> PathBuf {
        if let Some(dir) = &self.cache_dir {
            return dir.clone();
        }
        if let Ok(dir) = std::env::var("VAUQ_CACHE_DIR") {
            if !dir.is_empty() {
                return PathBuf::from(dir);
            }
        }
        self.output_dir.join("cache")
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        self.sweep
            .clone()
            .unwrap_or_else(|| SweepGrid::with_band(self.scoring.vauq.layer_band))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.score_names()?;
        self.scoring
            .validate()
            .map_err(|e| CliError::from(e).with_code(2))?;
        if self.seeds.is_empty() {
            return Err(config_err("seed list is empty".into()));
        }
        if self.jobs == 0 {
            return Err(config_err("jobs must be at least 1".into()));
        }
        if let Some(grid) = &self.sweep {
            grid.validate().map_err(|e| CliError::from(e).with_code(2))?;
        }
        Ok(())
    }
}

/// Flag overrides shared by `score` and `eval`.
#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Dataset path (line-delimited JSON records).
    #[arg(long)]
    pub dataset: Option<PathBuf>,

    /// Output directory.
    #[arg(long, short)]
    pub output: Option<PathBuf>,

    /// Trace cache directory.
    #[arg(long)]
    pub cache: Option<PathBuf>,

    /// Comma-separated score list.
    #[arg(long, value_delimiter = ',')]
    pub scores: Vec<String>,

    /// Weight on the image-information term.
    #[arg(long)]
    pub alpha: Option<f64>,

    /// Percentage of visual tokens in the core mask.
    #[arg(long)]
    pub k_percent: Option<u32>,

    /// Inclusive attention-layer band, as `start,end`.
    #[arg(long, value_parser = parse_band)]
    pub layer_band: Option<(usize, usize)>,

    /// Masking variant feeding the combined score.
    #[arg(long, value_parser = parse_mask_kind)]
    pub mask_kind: Option<MaskKind>,

    /// Comma-separated metric seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,

    /// Worker count for per-sample parallelism.
    #[arg(long)]
    pub jobs: Option<usize>,

    /// Maximum generation length.
    #[arg(long)]
    pub max_tokens: Option<usize>,
}

fn parse_band(value: &str) -> Result<(usize, usize), String> {
    let (a, b) = value
        .split_once(',')
        .ok_or_else(|| format!("expected start,end, got {value:?}"))?;
    let start = a.trim().parse().map_err(|e| format!("bad band start: {e}"))?;
    let end = b.trim().parse().map_err(|e| format!("bad band end: {e}"))?;
    Ok((start, end))
}

fn parse_mask_kind(value: &str) -> Result<MaskKind, String> {
    match value {
        "core" => Ok(MaskKind::Core),
        "random" => Ok(MaskKind::Random),
        "ground_truth" | "gt" => Ok(MaskKind::GroundTruth),
        "blank" => Ok(MaskKind::Blank),
        other => Err(format!(
            "unknown mask kind {other:?}; expected core, random, ground_truth or blank"
        )),
    }
}

impl Overrides {
    pub fn apply(&self, config: &mut RunConfig) {
        if let Some(d) = &self.dataset {
            config.dataset = d.clone();
        }
        if let Some(o) = &self.output {
            config.output_dir = o.clone();
        }
        if let Some(c) = &self.cache {
            config.cache_dir = Some(c.clone());
        }
        if !self.scores.is_empty() {
            config.scores = self.scores.clone();
        }
        if let Some(a) = self.alpha {
            config.scoring.vauq.alpha = a;
        }
        if let Some(k) = self.k_percent {
            config.scoring.vauq.k_percent = k;
        }
        if let Some(band) = self.layer_band {
            config.scoring.vauq.layer_band = band;
        }
        if let Some(kind) = self.mask_kind {
            config.scoring.vauq_mask = kind;
        }
        if !self.seeds.is_empty() {
            config.seeds = self.seeds.clone();
        }
        if let Some(j) = self.jobs {
            config.jobs = j;
        }
        if let Some(m) = self.max_tokens {
            config.scoring.max_tokens = m;
        }
    }
}

/// Serializes the effective configuration into the output directory.
pub fn write_effective_config(config: &RunConfig) -> CliResult<()> {
    let path = config.output_dir.join("run_config.json");
    let mut text = serde_json::to_string_pretty(config)
        .map_err(|e| config_err(format!("cannot serialize config: {e}")))?;
    text.push('\n');
    std::fs::write(&path, text)
        .map_err(|e| config_err(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}
