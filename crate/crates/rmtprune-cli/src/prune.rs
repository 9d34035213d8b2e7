use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rmtprune::matrixio::{self, LabeledDataset};
use rmtprune::nn::{MLPModel, TrainConfig};
use rmtprune::prune::{self as engine, CycleReport, PruneConfig};
use serde::Serialize;

use crate::run::{
    csv_bytes, emit, has_split, json_bytes, load_config, load_split, report_format, require_seed, CliResult, Failure,
    ReportFormat, RunManifest, Split,
};

/// Multi-cycle RMT pruning of a checkpoint, with optional mask-frozen
/// fine-tuning afterwards.
#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Pruning config (`key = value` lines with PruneConfig field names).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// IDX dataset directory; the test split (or else the train split) is
    /// used for per-cycle loss and accuracy.
    #[arg(long)]
    pub eval_data: Option<PathBuf>,
    #[arg(long)]
    pub eval_subset: Option<usize>,
    /// Pruned checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Cycle report, `.csv` or `.json`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub cycles: Option<usize>,
    #[arg(long)]
    pub r: Option<f64>,
    /// Fine-tune epochs on the train split of --eval-data after pruning.
    #[arg(long, default_value_t = 0)]
    pub finetune_epochs: usize,
    #[arg(long)]
    pub finetune_config: Option<PathBuf>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    /// Needed only with --finetune-epochs.
    #[arg(long, value_parser = crate::run::parse_seeds)]
    pub seed: Option<crate::run::SeedList>,
}

#[derive(Debug, Serialize)]
struct EffectiveConfig<'a> {
    prune: &'a PruneConfig,
    finetune: Option<&'a TrainConfig>,
}

/// One CSV row per (cycle, layer); cycle totals repeat on each row.
#[derive(Debug, Serialize)]
struct CycleRow {
    cycle: usize,
    sv_pruned: bool,
    reg_epochs: usize,
    layer: usize,
    eligible: bool,
    gamma: f64,
    mu: f64,
    lambda_plus_hat: f64,
    zeta1_target: usize,
    pruned: usize,
    f: f64,
    threshold: f64,
    sv_zeroed_entries: usize,
    nnz_before: usize,
    nnz_after_sv: usize,
    nnz_after_prune: usize,
    nnz_after: usize,
    total_nnz: usize,
    param_count: usize,
    sparsity: f64,
    loss: Option<f64>,
    accuracy: Option<f64>,
}

fn rows(reports: &[CycleReport]) -> Vec<CycleRow> {
    reports
        .iter()
        .flat_map(|c| {
            c.layers.iter().map(move |l| CycleRow {
                cycle: c.cycle,
                sv_pruned: c.sv_pruned,
                reg_epochs: c.reg_epochs,
                layer: l.layer,
                eligible: l.eligible,
                gamma: l.gamma,
                mu: l.mu,
                lambda_plus_hat: l.lambda_plus_hat,
                zeta1_target: l.zeta1_target,
                pruned: l.pruned,
                f: l.f,
                threshold: l.threshold,
                sv_zeroed_entries: l.sv_zeroed_entries,
                nnz_before: l.nnz_before,
                nnz_after_sv: l.nnz_after_sv,
                nnz_after_prune: l.nnz_after_prune,
                nnz_after: l.nnz_after,
                total_nnz: c.nnz,
                param_count: c.param_count,
                sparsity: c.sparsity,
                loss: c.loss.map(|l| l.total),
                accuracy: c.accuracy,
            })
        })
        .collect()
}

fn encode(reports: &[CycleReport], format: ReportFormat) -> CliResult<Vec<u8>> {
    match format {
        ReportFormat::Json => Ok(json_bytes(&reports)),
        ReportFormat::Csv => csv_bytes(&rows(reports)),
    }
}

pub fn run(a: &PruneArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let format = report_format(&a.report)?;
    let mut cfg: PruneConfig = load_config(a.config.as_deref(), manifest)?;
    if let Some(c) = a.cycles {
        cfg.n_cycles = c;
    }
    if let Some(r) = a.r {
        cfg.r = r;
    }
    let mut ft: Option<TrainConfig> = None;
    if a.finetune_epochs > 0 {
        let mut t: TrainConfig = load_config(a.finetune_config.as_deref(), manifest)?;
        t.epochs = a.finetune_epochs;
        t.seed = require_seed(&a.seed, manifest)?;
        if a.eval_data.is_none() {
            return Err(Failure::Usage("--finetune-epochs needs --eval-data with a train split".into()));
        }
        ft = Some(t);
    }
    manifest.config(&EffectiveConfig { prune: &cfg, finetune: ft.as_ref() });

    manifest.input(&a.model);
    let mut model = MLPModel::from_checkpoint(&matrixio::load_checkpoint(&a.model)?)?;
    let n_classes = model.n_outputs();
    let eval: Option<LabeledDataset> = match &a.eval_data {
        Some(dir) => {
            let split = if has_split(dir, Split::Test) { Split::Test } else { Split::Train };
            Some(load_split(dir, split, n_classes, a.eval_subset, manifest)?)
        }
        None => None,
    };
    let baseline = eval.as_ref().map(|d| model.accuracy(d)).transpose()?;

    let t0 = Instant::now();
    let reports = match engine::run_prune_cycles(&mut model, &cfg, eval.as_ref()) {
        Ok(r) => r,
        Err(fail) => {
            // Keep what finished before the failure.
            emit(manifest, &a.report, &encode(&fail.completed, format)?)?;
            manifest.summary = serde_json::json!({
                "completed_cycles": fail.completed.len(),
                "partial_layers": fail.partial_layers,
            });
            return Err(fail.error.into());
        }
    };
    manifest.timings.push(("prune".into(), t0.elapsed().as_secs_f64()));
    let pruned_accuracy = eval.as_ref().map(|d| model.accuracy(d)).transpose()?;

    let mut finetuned_accuracy = None;
    if let (Some(t), Some(dir)) = (&ft, &a.eval_data) {
        let train = load_split(dir, Split::Train, n_classes, a.train_subset, manifest)?;
        let t1 = Instant::now();
        engine::mask_frozen_finetune(&mut model, &train, None, t)?;
        manifest.timings.push(("finetune".into(), t1.elapsed().as_secs_f64()));
        finetuned_accuracy = eval.as_ref().map(|d| model.accuracy(d)).transpose()?;
    }

    emit(manifest, &a.report, &encode(&reports, format)?)?;
    emit(manifest, &a.out, &matrixio::encode_checkpoint(&model.to_checkpoint())?)?;
    let last = reports.last();
    manifest.summary = serde_json::json!({
        "cycles": reports.len(),
        "param_count": model.param_count(),
        "nnz": model.nnz(),
        "sparsity": last.map(|c| c.sparsity),
        "baseline_accuracy": baseline,
        "pruned_accuracy": pruned_accuracy,
        "finetuned_accuracy": finetuned_accuracy,
    });
    Ok(())
}
