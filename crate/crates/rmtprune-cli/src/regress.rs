use std::path::PathBuf;

use clap::Args;
use rmtprune::regression::{self, RegressionReport, RegressionSpec, ESTIMATORS};
use serde::Serialize;
use serde_json::json;

use crate::run::{csv_bytes, emit, load_config, require_seeds, CliResult, RunManifest};

/// Fourier-feature regression: MSE of no regularization, ridge, lasso and
/// spectral pruning, plus the cumulative singular-value distributions.
#[derive(Args, Debug)]
pub struct RegressArgs {
    /// RegressionSpec fields as `key = value` lines.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_parser = crate::run::parse_seeds)]
    pub seed: Option<crate::run::SeedList>,
    /// Output directory for mse.csv and spectrum_<estimator>.csv.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub noise_scale: Option<f64>,
    #[arg(long)]
    pub n_samples: Option<usize>,
}

#[derive(Debug, Serialize)]
struct MseRow<'a> {
    seed: u64,
    estimator: &'a str,
    lambda: Option<f64>,
    mse: f64,
    retained_rank: usize,
}

#[derive(Debug, Serialize)]
struct SpectrumRow {
    seed: u64,
    sigma: f64,
    cumulative_fraction: f64,
}

fn mean_mse(reports: &[RegressionReport], name: &str) -> f64 {
    reports.iter().filter_map(|r| r.mse(name)).sum::<f64>() / reports.len() as f64
}

pub fn run(a: &RegressArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let mut spec: RegressionSpec = load_config(a.spec.as_deref(), manifest)?;
    let seeds = require_seeds(&a.seed, manifest)?;
    if let Some(s) = a.noise_scale {
        spec.noise_scale = s;
    }
    if let Some(n) = a.n_samples {
        spec.n_samples = n;
    }
    spec.seed = seeds[0];
    manifest.config(&spec);
    let reports = regression::regression_study(&spec, &seeds)?;

    let mse: Vec<MseRow> = reports
        .iter()
        .flat_map(|r| {
            r.estimators.iter().map(move |e| MseRow {
                seed: r.seed,
                estimator: &e.estimator,
                lambda: e.lambda,
                mse: e.mse,
                retained_rank: e.retained_rank,
            })
        })
        .collect();
    emit(manifest, &a.out.join("mse.csv"), &csv_bytes(&mse)?)?;
    for name in ESTIMATORS {
        let rows: Vec<SpectrumRow> = reports
            .iter()
            .flat_map(|r| {
                let sv = r.estimators.iter().find(|e| e.estimator == name).map(|e| e.singular_values.clone()).unwrap_or_default();
                regression::cumulative_spectrum(&sv)
                    .into_iter()
                    .map(move |(sigma, cumulative_fraction)| SpectrumRow { seed: r.seed, sigma, cumulative_fraction })
            })
            .collect();
        emit(manifest, &a.out.join(format!("spectrum_{name}.csv")), &csv_bytes(&rows)?)?;
    }
    let warnings: Vec<&String> = reports.iter().flat_map(|r| &r.warnings).collect();
    manifest.summary = json!({
        "mean_mse": ESTIMATORS.iter().map(|n| (n.to_string(), mean_mse(&reports, n))).collect::<Vec<_>>(),
        "warnings": warnings,
    });
    Ok(())
}
