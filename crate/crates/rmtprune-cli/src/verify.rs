use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, ValueEnum};
use rmtprune::matrixio;
use rmtprune::nn::MLPModel;
use rmtprune::theory::{self, PlantedNetSpec, ScalingConfig, ScalingProtocol};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::run::{
    csv_bytes, emit, has_split, load_config, load_split, require_seed, require_seeds, usage, CliResult, RunManifest,
    Split,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    Perturbation,
    LossReduction,
    GammaSweep,
    NoiseInjection,
    AnScaling,
}

/// Monte Carlo checks of the network perturbation theory; one CSV per
/// suite.
#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long, value_enum)]
    pub suite: Suite,
    /// Suite config with `[planted]`, `[noise]` and `[scaling]` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = crate::run::parse_seeds)]
    pub seed: Option<crate::run::SeedList>,
    #[arg(long)]
    pub out: PathBuf,
    /// Trained checkpoint (noise-injection).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// IDX dataset directory (noise-injection, an-scaling).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Stop the width sweep before a width predicted to overrun this.
    #[arg(long)]
    pub time_budget: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Noise variances as multiples of 1/N, N the first hidden width.
    pub eps_over_n: Vec<f64>,
    /// Explicit variances; replaces `eps_over_n`.
    pub eps_grid: Option<Vec<f64>>,
    /// Layers receiving noise; default all but the output layer.
    pub layers: Option<Vec<usize>>,
    pub mu: f64,
    pub eval_subset: Option<usize>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { eps_over_n: vec![1.0, 100.0], eps_grid: None, layers: None, mu: 0.01, eval_subset: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifyConfig {
    pub planted: PlantedNetSpec,
    pub mu: f64,
    /// Slack factor in L(S) < (1 + ε)(L(W) − μ‖R‖²).
    pub epsilon: f64,
    pub gamma_grid: Vec<f64>,
    pub noise: NoiseConfig,
    pub scaling: ScalingConfig,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            planted: PlantedNetSpec::default(),
            mu: 0.01,
            epsilon: 0.01,
            gamma_grid: vec![1.0, 0.75, 0.5, 0.25, 0.0],
            noise: NoiseConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

/// Width-sweep rows without timings, which go to the manifest instead.
#[derive(Debug, Serialize)]
struct ScalingCsvRow {
    protocol: ScalingProtocol,
    n: usize,
    a_simple: f64,
    a_full: f64,
    b_full: f64,
    w3_col_norm: f64,
    w1s_max: f64,
    test_accuracy: Option<f64>,
}

pub fn run(a: &VerifyArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let mut cfg: VerifyConfig = load_config(a.config.as_deref(), manifest)?;
    let t0 = Instant::now();
    let bytes = match a.suite {
        Suite::Perturbation => {
            let seeds = require_seeds(&a.seed, manifest)?;
            manifest.config(&json!({ "suite": a.suite, "planted": cfg.planted }));
            let rep = theory::output_perturbation_check(&cfg.planted, &seeds)?;
            manifest.summary = json!({
                "prob_bound": rep.prob_bound,
                "violation_rate": rep.violation_rate,
                "violation_rate_col_norm": rep.violation_rate_col_norm,
                "max_deviation_without_noise": rep.rows.iter().map(|r| r.deviation_without_noise).fold(0.0, f64::max),
            });
            csv_bytes(&rep.rows)?
        }
        Suite::LossReduction => {
            let seeds = require_seeds(&a.seed, manifest)?;
            manifest.config(&json!({ "suite": a.suite, "planted": cfg.planted, "mu": cfg.mu, "epsilon": cfg.epsilon }));
            let rep = theory::loss_reduction_check(&cfg.planted, cfg.mu, cfg.epsilon, &seeds)?;
            manifest.summary = json!({
                "pass_fraction": rep.pass_fraction,
                "max_abs_acc_delta": rep.max_abs_acc_delta,
            });
            csv_bytes(&rep.rows)?
        }
        Suite::GammaSweep => {
            let seeds = require_seeds(&a.seed, manifest)?;
            manifest.config(&json!({ "suite": a.suite, "planted": cfg.planted, "mu": cfg.mu, "gamma_grid": cfg.gamma_grid }));
            let rep = theory::gamma_sweep(&cfg.planted, cfg.mu, &cfg.gamma_grid, &seeds)?;
            manifest.summary = json!({
                "nonincreasing_fraction": rep.nonincreasing_fraction,
                "strictly_decreasing_fraction": rep.strictly_decreasing_fraction,
            });
            csv_bytes(&rep.rows)?
        }
        Suite::NoiseInjection => {
            let seeds = require_seeds(&a.seed, manifest)?;
            let (Some(model_path), Some(dir)) = (&a.model, &a.data) else {
                return usage("noise-injection needs --model and --data");
            };
            manifest.input(model_path);
            let model = MLPModel::from_checkpoint(&matrixio::load_checkpoint(model_path)?)?;
            let split = if has_split(dir, Split::Test) { Split::Test } else { Split::Train };
            let data = load_split(dir, split, model.n_outputs(), cfg.noise.eval_subset, manifest)?;
            let n = model.layers[0].weight.out_dim() as f64;
            let eps: Vec<f64> = cfg.noise.eps_grid.clone().unwrap_or_else(|| cfg.noise.eps_over_n.iter().map(|m| m / n).collect());
            let layers: Vec<usize> = cfg.noise.layers.clone().unwrap_or_else(|| (0..model.layers.len() - 1).collect());
            cfg.noise.eps_grid = Some(eps.clone());
            cfg.noise.layers = Some(layers.clone());
            manifest.config(&json!({ "suite": a.suite, "noise": cfg.noise }));
            let rows = theory::noise_injection_experiment(&model, &data, &layers, &eps, &seeds, cfg.noise.mu)?;
            let summary: Vec<_> = eps
                .iter()
                .map(|&e| {
                    let sel: Vec<_> = rows.iter().filter(|r| r.eps == e).collect();
                    let max_abs = |f: fn(&theory::NoiseRow) -> f64| sel.iter().map(|r| f(r).abs()).fold(0.0, f64::max);
                    json!({
                        "eps": e,
                        "max_abs_d_accuracy": max_abs(|r| r.d_accuracy),
                        "max_abs_d_cross_entropy": max_abs(|r| r.d_cross_entropy),
                        "min_d_l2_loss": sel.iter().map(|r| r.d_l2_loss).fold(f64::INFINITY, f64::min),
                        "mean_d_accuracy": sel.iter().map(|r| r.d_accuracy).sum::<f64>() / sel.len() as f64,
                    })
                })
                .collect();
            manifest.summary = json!(summary);
            csv_bytes(&rows)?
        }
        Suite::AnScaling => {
            cfg.scaling.seed = require_seed(&a.seed, manifest)?;
            if a.time_budget.is_some() {
                cfg.scaling.time_budget_secs = a.time_budget;
            }
            let Some(dir) = &a.data else {
                return usage("an-scaling needs --data");
            };
            manifest.config(&json!({ "suite": a.suite, "scaling": cfg.scaling }));
            let train = load_split(dir, Split::Train, 10, Some(cfg.scaling.train_subset), manifest)?;
            let test = if has_split(dir, Split::Test) { Some(load_split(dir, Split::Test, 10, None, manifest)?) } else { None };
            let run = theory::an_scaling(&cfg.scaling, &train, test.as_ref())?;
            for r in &run.rows {
                manifest.timings.push((format!("{:?}/{}", r.protocol, r.n), r.seconds));
            }
            manifest.summary = json!({ "skipped_widths": run.skipped });
            let rows: Vec<ScalingCsvRow> = run
                .rows
                .iter()
                .map(|r| ScalingCsvRow {
                    protocol: r.protocol,
                    n: r.n,
                    a_simple: r.a_simple,
                    a_full: r.a_full,
                    b_full: r.b_full,
                    w3_col_norm: r.w3_col_norm,
                    w1s_max: r.w1s_max,
                    test_accuracy: r.test_accuracy,
                })
                .collect();
            csv_bytes(&rows)?
        }
    };
    manifest.timings.push(("suite".into(), t0.elapsed().as_secs_f64()));
    emit(manifest, &a.out, &bytes)
}
