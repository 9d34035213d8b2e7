use std::path::PathBuf;

use clap::Args;
use rayon::prelude::*;
use rmtprune::nn::MLPModel;
use rmtprune::rmt::{self, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_TAU};
use serde::Serialize;

use crate::run::{csv_bytes, emit, json_bytes, report_format, CliResult, ReportFormat, RunManifest};

/// Per-layer spectral metrics of a model checkpoint.
#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Report path, `.json` or `.csv`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: f64,
    #[arg(long, default_value_t = DEFAULT_TAU)]
    pub tau: f64,
}

#[derive(Debug, Serialize)]
struct AnalyzeConfig {
    alpha: f64,
    beta: f64,
    tau: f64,
}

#[derive(Debug, Serialize)]
struct LayerRow {
    layer: usize,
    gamma: f64,
    mu: f64,
    lambda_plus: f64,
    nnz: usize,
    sigma2_hat: f64,
    accepted: bool,
    degenerate: bool,
}

pub fn run(a: &AnalyzeArgs, manifest: &mut RunManifest) -> CliResult<()> {
    manifest.config(&AnalyzeConfig { alpha: a.alpha, beta: a.beta, tau: a.tau });
    let format = report_format(&a.report)?;
    manifest.input(&a.model);
    let model = MLPModel::from_checkpoint(&rmtprune::matrixio::load_checkpoint(&a.model)?)?;
    let rows: Vec<LayerRow> = model
        .layers
        .par_iter()
        .enumerate()
        .map(|(k, l)| {
            let w = l.weight.dense();
            let m = rmt::layer_metrics(&w, a.alpha, a.beta, a.tau)?;
            Ok(LayerRow {
                layer: k,
                gamma: m.gamma,
                mu: m.mu,
                lambda_plus: m.lambda_plus_hat,
                nnz: m.nnz,
                sigma2_hat: m.sigma2_hat,
                accepted: m.accepted,
                degenerate: m.degenerate,
            })
        })
        .collect::<rmtprune::Result<_>>()?;
    let bytes = match format {
        ReportFormat::Json => json_bytes(&rows),
        ReportFormat::Csv => csv_bytes(&rows)?,
    };
    emit(manifest, &a.report, &bytes)?;
    manifest.summary = serde_json::json!({ "layers": rows.len() });
    Ok(())
}
