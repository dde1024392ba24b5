//! `gen-data`: labeled synthetic datasets for the toy backend.

use std::path::PathBuf;

use vauq::eval::write_dataset;
use vauq::synthetic::{generate_population, PopulationKind, PopulationSpec};

use crate::{config_err, CliResult};

#[derive(Debug, clap::Args)]
pub struct GenDataArgs {
    /// Output dataset path (line-delimited JSON).
    #[arg(long, short)]
    pub out: PathBuf,

    /// Number of samples.
    #[arg(long, default_value_t = 200)]
    pub samples: usize,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Dataset name tag carried by every record.
    #[arg(long, default_value = "toy")]
    pub name: String,

    /// Population flavor: mixed, image-ignoring or counterfactual-heavy.
    #[arg(long, default_value = "mixed", value_parser = parse_kind)]
    pub kind: PopulationKind,

    /// Fraction of grounded counterfactual samples with off-evidence
    /// attention.
    #[arg(long, default_value_t = 0.15)]
    pub misleading_frac: f64,

    /// Attention jitter inside the grounded band.
    #[arg(long, default_value_t = 0.25)]
    pub jitter: f64,
}

fn parse_kind(value: &str) -> Result<PopulationKind, String> {
    match value {
        "mixed" => Ok(PopulationKind::Mixed),
        "image-ignoring" => Ok(PopulationKind::ImageIgnoring),
        "counterfactual-heavy" => Ok(PopulationKind::CounterfactualHeavy),
        other => Err(format!(
            "unknown population kind {other:?}; expected mixed, image-ignoring or counterfactual-heavy"
        )),
    }
}

pub fn run(args: GenDataArgs) -> CliResult<()> {
    if !(0.0..=1.0).contains(&args.misleading_frac) {
        return Err(config_err(format!(
            "misleading fraction {} outside [0, 1]",
            args.misleading_frac
        )));
    }
    let spec = PopulationSpec {
        kind: args.kind,
        n_samples: args.samples,
        seed: args.seed,
        dataset_name: args.name,
        misleading_frac: args.misleading_frac,
        attn_jitter: args.jitter,
    };
    let records = generate_population(&spec)?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| config_err(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    write_dataset(&args.out, &records)?;
    eprintln!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}
