use std::path::PathBuf;

use clap::Args;
use rmtprune::spiked::{self, SpikedSpec};
use serde::Deserialize;
use serde_json::json;

use crate::run::{csv_bytes, emit, require_seeds, usage, CliResult, Failure, RunManifest};

/// Singular values and vector overlaps of planted spiked matrices against
/// their predicted limits.
#[derive(Args, Debug)]
pub struct SpikedArgs {
    /// Spec with n_rows, n_cols, planted_sigmas, noise_scale.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_parser = crate::run::parse_seeds)]
    pub seed: Option<crate::run::SeedList>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_rows: Option<usize>,
    #[arg(long)]
    pub n_cols: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub sigmas: Option<Vec<f64>>,
    #[arg(long)]
    pub noise_scale: Option<f64>,
}

/// Spec file fields; every one may be given on the command line instead.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    n_rows: Option<usize>,
    n_cols: Option<usize>,
    planted_sigmas: Option<Vec<f64>>,
    noise_scale: Option<f64>,
}

pub fn run(a: &SpikedArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let file: SpecFile = crate::run::load_config(a.spec.as_deref(), manifest)?;
    let seeds = require_seeds(&a.seed, manifest)?;
    let missing = |k: &str| Failure::Usage(format!("spiked needs {k} from --spec or the command line"));
    let spec = SpikedSpec {
        n_rows: a.n_rows.or(file.n_rows).ok_or_else(|| missing("n_rows"))?,
        n_cols: a.n_cols.or(file.n_cols).ok_or_else(|| missing("n_cols"))?,
        planted_sigmas: a.sigmas.clone().or(file.planted_sigmas).ok_or_else(|| missing("planted_sigmas"))?,
        noise_scale: a.noise_scale.or(file.noise_scale).unwrap_or(1.0),
        seed: seeds[0],
    };
    manifest.config(&json!({
        "n_rows": spec.n_rows,
        "n_cols": spec.n_cols,
        "planted_sigmas": spec.planted_sigmas,
        "noise_scale": spec.noise_scale,
    }));
    if spec.planted_sigmas.is_empty() {
        return usage("at least one planted singular value is needed");
    }
    let rows = spiked::spike_report(&spec, &seeds)?;
    let th = spiked::thresholds(&spec)?;
    manifest.summary = json!({ "thresholds": th, "rows": rows.len() });
    emit(manifest, &a.out, &csv_bytes(&rows)?)
}
