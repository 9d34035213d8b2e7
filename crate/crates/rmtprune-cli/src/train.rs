use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rmtprune::linalg::norm2;
use rmtprune::matrixio;
use rmtprune::nn::{self, Activation, EpochHook, EpochRecord, Init, MLPModel, Optimizer, TrainConfig};
use rmtprune::prune::{mp_singular_value_prune, KeepSchedule, MpAction, PruneConfig};
use rmtprune::rng;
use serde::Serialize;

use crate::run::{
    emit, has_split, load_config, load_split, parse_fraction, require_seed, usage, CliResult, Failure, RunManifest,
    Split,
};

/// Train an MLP with SGD, optionally with MP-based singular-value pruning
/// every K epochs.
#[derive(Args, Debug)]
pub struct TrainArgs {
    /// IDX dataset directory (train split required, test split optional).
    #[arg(long)]
    pub data: PathBuf,
    /// Layer widths, e.g. `784,512,512,10`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub topology: Vec<usize>,
    /// Training config (`key = value` lines with TrainConfig field names).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = crate::run::parse_seeds)]
    pub seed: Option<crate::run::SeedList>,
    /// Trained checkpoint.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-epoch CSV log.
    #[arg(long)]
    pub log: PathBuf,
    #[arg(long, default_value = "relu")]
    pub activation: String,
    #[arg(long)]
    pub activation_on_final: bool,
    /// `he`, `fan-in`, `fan-in-squared` or a standard deviation.
    #[arg(long, default_value = "he")]
    pub init: String,
    #[arg(long)]
    pub bias: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub train_subset: Option<usize>,
    #[arg(long)]
    pub test_subset: Option<usize>,
    /// Rescale inputs so the largest row norm equals this value.
    #[arg(long)]
    pub normalize: Option<f64>,
    #[arg(long)]
    pub mp_prune_every: Option<usize>,
    /// Keep-fraction slope, e.g. `1/200`.
    #[arg(long, value_parser = parse_fraction)]
    pub f_slope: Option<f64>,
    /// Spectral settings (alpha, beta, tau, min_dim) for MP pruning.
    #[arg(long)]
    pub prune_config: Option<PathBuf>,
}

fn parse_init(s: &str) -> CliResult<Init> {
    match s {
        "he" => Ok(Init::He),
        "fan-in" => Ok(Init::FanIn),
        "fan-in-squared" => Ok(Init::FanInSquared),
        _ => match s.parse::<f64>() {
            Ok(x) if x > 0.0 && x.is_finite() => Ok(Init::Std(x)),
            _ => usage(format!("unknown init {s:?}")),
        },
    }
}

#[derive(Debug, Serialize)]
struct EffectiveConfig<'a> {
    topology: &'a [usize],
    activation: Activation,
    activation_on_final: bool,
    init: Init,
    bias: bool,
    train: &'a TrainConfig,
    train_subset: Option<usize>,
    test_subset: Option<usize>,
    normalize: Option<f64>,
    mp_prune_every: Option<usize>,
    f_slope: Option<f64>,
    prune: Option<&'a PruneConfig>,
}

/// Prunes every `every` epochs and remembers each layer's retained rank.
struct MpHook {
    every: usize,
    schedule: KeepSchedule,
    cfg: PruneConfig,
    ranks: Vec<usize>,
    keep: f64,
}

impl EpochHook for MpHook {
    fn after_epoch(&mut self, epoch: usize, model: &mut MLPModel, opt: &mut Optimizer) -> rmtprune::Result<Vec<(String, f64)>> {
        let done = epoch + 1;
        if done % self.every == 0 {
            let reps = mp_singular_value_prune(model, &self.schedule, &self.cfg, done)?;
            self.keep = self.schedule.keep_fraction(done);
            let mut reshaped = false;
            for r in &reps {
                if !matches!(r.action, MpAction::Exempt | MpAction::Rejected) {
                    self.ranks[r.layer] = r.retained_rank;
                }
                reshaped |= matches!(r.action, MpAction::Split | MpAction::Merged);
            }
            if reshaped {
                opt.reset();
            }
        }
        let mut extra = vec![("keep_fraction".to_string(), self.keep)];
        extra.extend(self.ranks.iter().enumerate().map(|(k, &r)| (format!("retained_rank_{k}"), r as f64)));
        Ok(extra)
    }
}

fn opt_num(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn log_bytes(log: &[EpochRecord]) -> CliResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Failure::Usage(format!("csv encoding: {e}"));
    if let Some(first) = log.first() {
        let mut header: Vec<String> =
            ["epoch", "lr", "cross_entropy", "l1", "l2", "stable_rank", "total", "train_acc", "test_acc"]
                .map(String::from)
                .to_vec();
        header.extend((0..first.layer_nnz.len()).map(|k| format!("nnz_{k}")));
        header.extend(first.extra.iter().map(|(k, _)| k.clone()));
        w.write_record(&header).map_err(err)?;
    }
    for r in log {
        let mut rec = vec![
            r.epoch.to_string(),
            r.lr.to_string(),
            r.loss.cross_entropy.to_string(),
            r.loss.l1_term.to_string(),
            r.loss.l2_term.to_string(),
            r.loss.stable_rank_term.to_string(),
            r.loss.total.to_string(),
            r.train_acc.to_string(),
            opt_num(r.test_acc),
        ];
        rec.extend(r.layer_nnz.iter().map(|n| n.to_string()));
        rec.extend(r.extra.iter().map(|(_, v)| v.to_string()));
        w.write_record(&rec).map_err(err)?;
    }
    w.into_inner().map_err(|e| Failure::Usage(format!("csv encoding: {e}")))
}

pub fn run(a: &TrainArgs, manifest: &mut RunManifest) -> CliResult<()> {
    let mut cfg: TrainConfig = load_config(a.config.as_deref(), manifest)?;
    cfg.seed = require_seed(&a.seed, manifest)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = a.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    let activation = Activation::parse(&a.activation)?;
    let init = parse_init(&a.init)?;
    let mp = match (a.mp_prune_every, a.f_slope) {
        (Some(0), _) => return usage("--mp-prune-every must be positive"),
        (Some(k), slope) => {
            let pc: PruneConfig = load_config(a.prune_config.as_deref(), manifest)?;
            Some((k, KeepSchedule::new(slope.unwrap_or(1.0 / 200.0))?, pc))
        }
        (None, Some(_)) => return usage("--f-slope needs --mp-prune-every"),
        (None, None) => None,
    };
    manifest.config(&EffectiveConfig {
        topology: &a.topology,
        activation,
        activation_on_final: a.activation_on_final,
        init,
        bias: a.bias,
        train: &cfg,
        train_subset: a.train_subset,
        test_subset: a.test_subset,
        normalize: a.normalize,
        mp_prune_every: mp.as_ref().map(|m| m.0),
        f_slope: mp.as_ref().map(|m| m.1.slope),
        prune: mp.as_ref().map(|m| &m.2),
    });

    let n_classes = *a.topology.last().ok_or_else(|| Failure::Usage("empty topology".into()))?;
    let mut train = load_split(&a.data, Split::Train, n_classes, a.train_subset, manifest)?;
    let mut test = if has_split(&a.data, Split::Test) {
        Some(load_split(&a.data, Split::Test, n_classes, a.test_subset, manifest)?)
    } else {
        None
    };
    if let Some(target) = a.normalize {
        // One factor for both splits, taken from the training set.
        let max = (0..train.len()).map(|i| norm2(train.features.row(i))).fold(0.0, f64::max);
        if !(target > 0.0) || max == 0.0 {
            return usage("--normalize needs a positive target and nonzero inputs");
        }
        let factor = target / max;
        train.features = train.features.scale(factor);
        if let Some(t) = &mut test {
            t.features = t.features.scale(factor);
        }
    }
    if train.n_features() != a.topology[0] {
        return usage(format!("data has {} features, topology expects {}", train.n_features(), a.topology[0]));
    }

    let mut model = MLPModel::init(
        &a.topology,
        activation,
        a.activation_on_final,
        init,
        a.bias,
        &mut rng::substream(cfg.seed, u64::MAX),
    )?;
    let t0 = Instant::now();
    let log = match mp {
        Some((every, schedule, pc)) => {
            let ranks = model.layers.iter().map(|l| l.weight.out_dim().min(l.weight.in_dim())).collect();
            let mut hook = MpHook { every, schedule, cfg: pc, ranks, keep: 1.0 };
            nn::train(&mut model, &train, test.as_ref(), &cfg, &mut [&mut hook])?
        }
        None => nn::train(&mut model, &train, test.as_ref(), &cfg, &mut [])?,
    };
    manifest.timings.push(("train".into(), t0.elapsed().as_secs_f64()));

    emit(manifest, &a.log, &log_bytes(&log)?)?;
    emit(manifest, &a.out, &matrixio::encode_checkpoint(&model.to_checkpoint())?)?;
    let last = log.last();
    manifest.summary = serde_json::json!({
        "epochs": log.len(),
        "train_accuracy": last.map(|r| r.train_acc),
        "test_accuracy": last.and_then(|r| r.test_acc),
        "param_count": model.param_count(),
    });
    Ok(())
}
