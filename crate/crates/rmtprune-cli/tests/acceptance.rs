//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`). Every criterion is
//! evaluated and reported; the process exits 0 once all lines are printed
//! so that a FAIL is visible without aborting the remaining checks. Set
//! `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.
//!
//! The Fashion-MNIST criteria read IDX files from `data/fashion-mnist` at
//! the workspace root (override with `RMTPRUNE_DATA`).

use std::cell::OnceCell;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rmtprune::linalg::RealMatrix;
use rmtprune::matrixio::{self, LabeledDataset};
use rmtprune::nn::{self, Activation, Init, Layer, LrSchedule, MLPModel, TrainConfig, Weight};
use rmtprune::prune::{self, KeepSchedule, MpAction, PruneConfig};
use rmtprune::regression::{self, RegressionSpec};
use rmtprune::rmt::{self, MPParams};
use rmtprune::spiked::{self, SpikedSpec};
use rmtprune::theory::{self, PlantedNetSpec, ScalingConfig, ScalingProtocol};
use rmtprune::{rng, Result};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Result<Outcome> {
    Ok(Outcome { pass, detail: detail.into() })
}

fn seeds(n: u64) -> Vec<u64> {
    (0..n).collect()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

fn data_dir() -> PathBuf {
    std::env::var_os("RMTPRUNE_DATA")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/fashion-mnist"))
}

fn load(split: &str, limit: Option<usize>) -> Result<LabeledDataset> {
    let dir = data_dir();
    let d = matrixio::load_idx_dataset(
        &dir.join(format!("{split}-images-idx3-ubyte")),
        &dir.join(format!("{split}-labels-idx1-ubyte")),
        10,
    )?;
    Ok(match limit {
        Some(n) => d.take(n),
        None => d,
    })
}

// ---------------------------------------------------------------- 1 to 4

fn c1_bema() -> Result<Outcome> {
    let t0 = Instant::now();
    let (mut s2, mut lp, mut worst_fit) = (Vec::new(), Vec::new(), 0.0f64);
    for seed in seeds(20) {
        let w = RealMatrix::gaussian(1000, 1000, 1.0, &mut rng::seeded(seed));
        let fit = rmt::bema_fit(&rmt::compute_esd(&w)?, 0.25, 0.8)?;
        s2.push(fit.sigma2_hat);
        lp.push(fit.lambda_plus_hat);
        worst_fit = worst_fit.max(fit.fit_error);
    }
    let secs = t0.elapsed().as_secs_f64();
    let (ms2, mlp) = (mean(s2), mean(lp));
    outcome(
        (0.98..=1.02).contains(&ms2) && (3.9..=4.1).contains(&mlp) && worst_fit < 0.05 && secs < 60.0,
        format!("mean sigma2 {ms2:.4} (0.98..1.02), mean lambda+ {mlp:.4} (3.9..4.1), max fit error {worst_fit:.4} (<0.05), {secs:.1}s (<60)"),
    )
}

fn c2_spikes() -> Result<Outcome> {
    let t0 = Instant::now();
    let spec = SpikedSpec { n_rows: 2000, n_cols: 2000, planted_sigmas: vec![3.0, 2.0, 1.5, 0.5], noise_scale: 1.0, seed: 0 };
    let rows = spiked::spike_report(&spec, &seeds(10))?;
    let secs = t0.elapsed().as_secs_f64();
    let mut pass = secs < 300.0;
    let mut parts = Vec::new();
    for (i, &sigma) in spec.planted_sigmas.iter().enumerate() {
        let sel: Vec<_> = rows.iter().filter(|r| r.i == i).collect();
        let sp = mean(sel.iter().map(|r| r.sigma_prime_emp));
        let ol = mean(sel.iter().map(|r| r.overlap_left_emp));
        let or = mean(sel.iter().map(|r| r.overlap_right_emp));
        if sigma > 1.0 {
            let target = (1.0 + sigma * sigma) / sigma;
            let ov = 1.0 - 1.0 / (sigma * sigma);
            let rel = (sp / target - 1.0).abs();
            pass &= rel <= 0.02 && (ol - ov).abs() <= 0.05 && (or - ov).abs() <= 0.05;
            parts.push(format!("s={sigma}: s' {sp:.4} vs {target:.4} ({:.2}%), overlaps {ol:.3}/{or:.3} vs {ov:.3}", 100.0 * rel));
        } else {
            pass &= (sp - 2.0).abs() <= 0.1 && ol < 0.05 && or < 0.05;
            parts.push(format!("s={sigma}: s' {sp:.4} vs 2, overlaps {ol:.4}/{or:.4} (<0.05)"));
        }
    }
    outcome(pass, format!("{}; {secs:.0}s (<300)", parts.join("; ")))
}

fn c3_time_variance() -> Result<Outcome> {
    let mut sp = Vec::new();
    for seed in seeds(10) {
        let spec = SpikedSpec { n_rows: 2000, n_cols: 2000, planted_sigmas: vec![1.0], noise_scale: 0.25, seed };
        sp.push(spiked::generate_spiked(&spec)?.w.singular_values()?[0]);
    }
    let m = mean(sp);
    let rel = (m / 1.25 - 1.0).abs();
    outcome(rel <= 0.03, format!("mean s' {m:.4} vs 1.25 ({:.2}%, <3%)", 100.0 * rel))
}

fn c4_d_transform() -> Result<Outcome> {
    let law = MPParams::new(1.0, 1.0)?;
    let mut worst = 0.0f64;
    for sigma in [1.5, 2.0, 3.0] {
        let z = rmt::d_inverse(1.0 / (sigma * sigma), &law)?;
        worst = worst.max((z - (1.0 + sigma * sigma) / sigma).abs());
    }
    let tb = rmt::theta_bar(&law)?;
    outcome(worst < 1e-4 && (tb - 1.0).abs() < 1e-3, format!("max |D^-1(1/s^2) - (1+s^2)/s| {worst:.2e} (<1e-4), theta_bar {tb:.6} (|.-1|<1e-3)"))
}

// ---------------------------------------------------------------- 5 to 7

fn c5_perturbation() -> Result<Outcome> {
    let spec = PlantedNetSpec { n_samples: 100, ..PlantedNetSpec::default() };
    let rep = theory::output_perturbation_check(&spec, &seeds(10))?;
    let exact = rep.rows.iter().all(|r| r.deviation_without_noise == 0.0);
    outcome(
        rep.violation_rate <= rep.prob_bound && exact,
        format!(
            "violation rate {:.4} <= bound {:.4}; without R max deviation {:e}; column-sum norm rate {:.3}",
            rep.violation_rate,
            rep.prob_bound,
            rep.rows.iter().map(|r| r.deviation_without_noise).fold(0.0, f64::max),
            rep.violation_rate_col_norm
        ),
    )
}

fn planted_1000() -> PlantedNetSpec {
    PlantedNetSpec { n_samples: 1000, ..PlantedNetSpec::default() }
}

fn c6_loss_reduction() -> Result<Outcome> {
    let rep = theory::loss_reduction_check(&planted_1000(), 0.01, 0.01, &seeds(10))?;
    outcome(
        rep.pass_fraction >= 0.9 && rep.max_abs_acc_delta <= 0.01,
        format!("inequality holds in {:.0}% of seeds (>=90%), max |d acc| {:.4} (<=0.01)", 100.0 * rep.pass_fraction, rep.max_abs_acc_delta),
    )
}

fn c7_gamma_sweep() -> Result<Outcome> {
    let rep = theory::gamma_sweep(&planted_1000(), 0.01, &[1.0, 0.75, 0.5, 0.25, 0.0], &seeds(10))?;
    outcome(
        rep.nonincreasing_fraction >= 0.9,
        format!(
            "nonincreasing in {:.0}% of seeds (>=90%), strictly decreasing in {:.0}%",
            100.0 * rep.nonincreasing_fraction,
            100.0 * rep.strictly_decreasing_fraction
        ),
    )
}

// ---------------------------------------------------------------- desk MLP

struct Desk {
    model: MLPModel,
    train: LabeledDataset,
    test: LabeledDataset,
    baseline: f64,
    seconds: f64,
}

const DESK_SEED: u64 = 1;

fn train_desk() -> Result<Desk> {
    let t0 = Instant::now();
    let train = load("train", Some(10_000))?;
    let test = load("t10k", None)?;
    let mut model = MLPModel::init(&[784, 512, 512, 10], Activation::Relu, false, Init::He, true, &mut rng::substream(DESK_SEED, u64::MAX))?;
    let cfg = TrainConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        lr_schedule: LrSchedule::Cosine,
        epochs: 30,
        batch_size: 128,
        seed: DESK_SEED,
        log_metrics: false,
        ..TrainConfig::default()
    };
    nn::train(&mut model, &train, None, &cfg, &mut [])?;
    let baseline = model.accuracy(&test)?;
    Ok(Desk { model, train, test, baseline, seconds: t0.elapsed().as_secs_f64() })
}

fn desk(cell: &OnceCell<std::result::Result<Desk, String>>) -> Result<&Desk> {
    cell.get_or_init(|| train_desk().map_err(|e| e.to_string()))
        .as_ref()
        .map_err(|e| rmtprune::Error::Data(format!("desk model unavailable: {e}")))
}

fn c8_noise(cell: &OnceCell<std::result::Result<Desk, String>>) -> Result<Outcome> {
    let d = desk(cell)?;
    let n = d.model.layers[0].weight.out_dim() as f64;
    let hidden: Vec<usize> = (0..d.model.layers.len() - 1).collect();
    let rows = theory::noise_injection_experiment(&d.model, &d.test, &hidden, &[1.0 / n, 100.0 / n], &seeds(5), 0.01)?;
    let small: Vec<_> = rows.iter().filter(|r| r.eps == 1.0 / n).collect();
    let large: Vec<_> = rows.iter().filter(|r| r.eps == 100.0 / n).collect();
    let max_dacc = small.iter().map(|r| r.d_accuracy.abs()).fold(0.0, f64::max);
    let max_dce = small.iter().map(|r| r.d_cross_entropy.abs()).fold(0.0, f64::max);
    let l2_up = small.iter().all(|r| r.d_l2_loss > 0.0);
    let drop = -mean(large.iter().map(|r| r.d_accuracy));
    // Same model, variance 1/N² (the standard-deviation reading of ε).
    let sq = theory::noise_injection_experiment(&d.model, &d.test, &hidden, &[1.0 / (n * n)], &seeds(5), 0.01)?;
    let sq_dacc = sq.iter().map(|r| r.d_accuracy.abs()).fold(0.0, f64::max);
    let sq_dce = sq.iter().map(|r| r.d_cross_entropy.abs()).fold(0.0, f64::max);
    outcome(
        max_dacc < 0.005 && max_dce < 0.01 && l2_up && drop > 0.05,
        format!(
            "variance 1/N (N={n}): max |d acc| {max_dacc:.4} (<0.005), max |d CE| {max_dce:.4} (<0.01), L2 loss up in all seeds: {l2_up}; \
             variance 100/N: mean acc drop {drop:.3} (>0.05); [info] variance 1/N^2: max |d acc| {sq_dacc:.4}, max |d CE| {sq_dce:.4}"
        ),
    )
}

fn c11_pipeline(cell: &OnceCell<std::result::Result<Desk, String>>) -> Result<Outcome> {
    let d = desk(cell)?;
    let t0 = Instant::now();
    let cfg = PruneConfig { r: 0.06, n_cycles: 19, ..PruneConfig::default() };
    let mut model = d.model.clone();
    let reports = prune::run_prune_cycles(&mut model, &cfg, Some(&d.test))?;
    let mut again = d.model.clone();
    let reports2 = prune::run_prune_cycles(&mut again, &cfg, Some(&d.test))?;
    // Exempt layers report NaN metrics, so compare renderings: f64 Debug
    // output is the shortest round-trip form, hence bit-exact.
    let deterministic = format!("{reports:?}") == format!("{reports2:?}") && model == again;
    let mut nnz = vec![d.model.nnz()];
    nnz.extend(reports.iter().map(|r| r.nnz));
    let monotone = nnz.windows(2).all(|w| w[1] <= w[0]);
    let removed = 1.0 - model.nnz() as f64 / d.model.param_count() as f64;
    let ft = TrainConfig {
        learning_rate: 0.005,
        momentum: 0.9,
        lr_schedule: LrSchedule::Cosine,
        epochs: 7,
        seed: DESK_SEED,
        log_metrics: false,
        ..TrainConfig::default()
    };
    let pruned_acc = model.accuracy(&d.test)?;
    prune::mask_frozen_finetune(&mut model, &d.train, None, &ft)?;
    let final_acc = model.accuracy(&d.test)?;
    let drop_pp = 100.0 * (d.baseline - final_acc);
    let secs = d.seconds + t0.elapsed().as_secs_f64();
    outcome(
        d.baseline >= 0.85 && removed >= 0.30 && drop_pp <= 2.0 && monotone && deterministic && secs < 1800.0,
        format!(
            "baseline {:.2}% (>=85), removed {:.1}% of parameters (>=30), accuracy after pruning {:.2}%, after 7 fine-tune epochs {:.2}% \
             (drop {drop_pp:.2} pp, <=2), nnz monotone: {monotone}, deterministic: {deterministic}, {secs:.0}s incl. training (<1800)",
            100.0 * d.baseline,
            100.0 * removed,
            100.0 * pruned_acc,
            100.0 * final_acc
        ),
    )
}

// ---------------------------------------------------------------- 9

fn strictly_decreasing(xs: &[f64]) -> bool {
    xs.windows(2).all(|w| w[1] < w[0])
}

fn c9_scaling() -> Result<Outcome> {
    let t0 = Instant::now();
    let budget = 900.0;
    let train = load("train", Some(10_000))?;
    let test = load("t10k", None)?;
    let cfg = ScalingConfig { time_budget_secs: Some(budget), ..ScalingConfig::default() };
    let run = theory::an_scaling(&cfg, &train, Some(&test))?;
    let secs = t0.elapsed().as_secs_f64();
    let mut pass = run.skipped.is_empty() && secs < budget;
    let mut parts = Vec::new();
    for p in [ScalingProtocol::A, ScalingProtocol::B] {
        let rows: Vec<_> = run.rows.iter().filter(|r| r.protocol == p).collect();
        let a: Vec<f64> = rows.iter().map(|r| r.a_full).collect();
        let b: Vec<f64> = rows.iter().map(|r| r.b_full).collect();
        let below = rows.iter().filter(|r| r.n >= 1000).all(|r| r.b_full < r.a_full);
        let ok = strictly_decreasing(&a) && strictly_decreasing(&b) && below;
        pass &= ok;
        let widths: Vec<String> = rows.iter().map(|r| format!("{}:{:.3e}/{:.3e}", r.n, r.a_full, r.b_full)).collect();
        parts.push(format!("{p:?} a/b {} trend ok: {ok}", widths.join(" ")));
    }
    let init = theory::an_scaling_at_init(&ScalingConfig::default(), &train)?;
    let init_ok = [ScalingProtocol::A, ScalingProtocol::B].iter().all(|&p| {
        let rows: Vec<_> = init.iter().filter(|r| r.protocol == p).collect();
        strictly_decreasing(&rows.iter().map(|r| r.a_full).collect::<Vec<_>>())
            && strictly_decreasing(&rows.iter().map(|r| r.b_full).collect::<Vec<_>>())
    });
    outcome(
        pass,
        format!(
            "trained widths completed {:?}, skipped {:?} within {budget:.0}s budget ({secs:.0}s); {}; [info] full grid at initialisation strictly decreasing: {init_ok}",
            run.rows.iter().map(|r| r.n).collect::<std::collections::BTreeSet<_>>(),
            run.skipped,
            parts.join("; ")
        ),
    )
}

// ---------------------------------------------------------------- 10

/// Hidden pre-activations and parameters must stay clear of kinks by this
/// margin for central differences to be valid.
const KINK_MARGIN: f64 = 1e-3;

fn clear_of_kinks(model: &MLPModel, x: &RealMatrix, check_weights: bool) -> bool {
    let mut h = x.clone();
    for (k, l) in model.layers.iter().enumerate() {
        let Weight::Dense(w) = &l.weight else { return false };
        if check_weights && w.as_slice().iter().any(|v| v.abs() < KINK_MARGIN) {
            return false;
        }
        let mut z = h.matmul(&w.transpose()).expect("shapes agree");
        if let Some(b) = &l.bias {
            for i in 0..z.rows() {
                z.row_mut(i).iter_mut().zip(b).for_each(|(a, bb)| *a += bb);
            }
        }
        let last = k + 1 == model.layers.len();
        if !last || model.activation_on_final {
            if z.as_slice().iter().any(|v| v.abs() < KINK_MARGIN) {
                return false;
            }
            z = z.map(|v| model.activation.apply(v));
        }
        h = z;
    }
    true
}

fn params_mut(model: &mut MLPModel) -> Vec<&mut f64> {
    let mut out = Vec::new();
    for l in &mut model.layers {
        if let Weight::Dense(w) = &mut l.weight {
            out.extend(w.as_mut_slice().iter_mut());
        }
        if let Some(b) = &mut l.bias {
            out.extend(b.iter_mut());
        }
    }
    out
}

fn fd_relative_error(act: Activation, regularized: bool, seed: u64) -> Result<f64> {
    let mut r = rng::seeded(seed);
    let (model, data) = loop {
        let model = MLPModel::init(&[6, 5, 4, 3], act, false, Init::Std(0.6), true, &mut r)?;
        let mut model = model;
        for l in &mut model.layers {
            l.bias = Some(rng::normals(&mut r, l.weight.out_dim(), 0.3));
        }
        let x = RealMatrix::gaussian(8, 6, 1.0, &mut r);
        let labels: Vec<usize> = (0..8).map(|i| i % 3).collect();
        if clear_of_kinks(&model, &x, regularized) {
            break (model, LabeledDataset::new(x, labels, 3)?);
        }
    };
    let cfg = TrainConfig {
        mu1: if regularized { 0.01 } else { 0.0 },
        mu2: if regularized { 0.02 } else { 0.0 },
        stable_rank_coeff: if regularized { 0.05 } else { 0.0 },
        stable_rank_period: 1,
        ..TrainConfig::default()
    };
    let analytic: Vec<f64> = model
        .gradient(&data, &cfg, 0)?
        .into_iter()
        .flat_map(|g| {
            let mut v: Vec<f64> = g.weight.into_iter().flat_map(|w| w.into_vec()).collect();
            v.extend(g.bias.unwrap_or_default());
            v
        })
        .collect();
    let h = 1e-5;
    let n = params_mut(&mut model.clone()).len();
    let mut numeric = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = model.clone();
        *params_mut(&mut plus)[i] += h;
        let mut minus = model.clone();
        *params_mut(&mut minus)[i] -= h;
        numeric.push((plus.loss(&data, &cfg, 0)?.total - minus.loss(&data, &cfg, 0)?.total) / (2.0 * h));
    }
    let diff: f64 = analytic.iter().zip(&numeric).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = rmtprune::linalg::norm2(&analytic).max(rmtprune::linalg::norm2(&numeric));
    Ok(diff / scale)
}

fn c10_gradients() -> Result<Outcome> {
    let mut worst = 0.0f64;
    let mut parts = Vec::new();
    for act in [Activation::Relu, Activation::Abs] {
        for reg in [false, true] {
            let mut w = 0.0f64;
            for seed in seeds(20) {
                w = w.max(fd_relative_error(act, reg, 1000 + seed)?);
            }
            parts.push(format!("{}{} {w:.1e}", act.name(), if reg { "+L1/L2/SR" } else { "" }));
            worst = worst.max(w);
        }
    }
    outcome(worst < 1e-5, format!("max relative error over 20 points: {} (<1e-5)", parts.join(", ")))
}

// ---------------------------------------------------------------- 12, 13

fn c12_mp_rank() -> Result<Outcome> {
    let sigmas = vec![3.0, 2.0, 1.5, 0.5];
    let planted = sigmas.iter().filter(|&&s| s > 1.0).count();
    let rank_at = |beta: f64, seed: u64| -> Result<(usize, MpAction)> {
        let w = spiked::generate_spiked(&SpikedSpec { n_rows: 1000, n_cols: 1000, planted_sigmas: sigmas.clone(), noise_scale: 1.0, seed })?.w;
        let mut model = MLPModel::new(vec![Layer { weight: Weight::Dense(w), bias: None, mask: None }], Activation::Relu, false)?;
        let cfg = PruneConfig { beta, ..PruneConfig::default() };
        let rep = prune::mp_singular_value_prune(&mut model, &KeepSchedule::new(1.0)?, &cfg, 1)?;
        Ok((rep[0].retained_rank, rep[0].action))
    };
    let mut ranks = Vec::new();
    let mut default_beta = Vec::new();
    for seed in seeds(10) {
        let (r, action) = rank_at(0.01, seed)?;
        ranks.push((r, action));
        default_beta.push(rank_at(0.8, seed)?.0);
    }
    let pass = ranks.iter().all(|&(r, a)| r == planted && matches!(a, MpAction::Pruned | MpAction::Split));
    outcome(
        pass,
        format!(
            "f=0, beta=0.01: retained ranks {:?} vs {planted} supercritical spikes; [info] beta=0.8 ranks {default_beta:?}",
            ranks.iter().map(|r| r.0).collect::<Vec<_>>()
        ),
    )
}

fn c13_regression() -> Result<Outcome> {
    let reps = regression::regression_study(&RegressionSpec::default(), &seeds(10))?;
    let m = |name: &str| mean(reps.iter().filter_map(|r| r.mse(name)));
    let (none, ridge, lasso, pruning) = (m("none"), m("ridge"), m("lasso"), m("pruning"));
    let ranks: Vec<usize> = reps
        .iter()
        .filter_map(|r| r.estimators.iter().find(|e| e.estimator == "pruning").map(|e| e.retained_rank))
        .collect();
    outcome(
        pruning < lasso && lasso < ridge && ridge <= none && ranks.iter().all(|&r| r <= 22),
        format!("mean MSE pruning {pruning:.4} < lasso {lasso:.4} < ridge {ridge:.4} <= none {none:.4}; pruned ranks {ranks:?} (<=22)"),
    )
}

// ---------------------------------------------------------------- 14

fn write_idx(dir: &Path, prefix: &str, images: &[Vec<u8>], labels: &[u8], side: u32) {
    let mut img = Vec::new();
    img.extend(0x0000_0803u32.to_be_bytes());
    img.extend((images.len() as u32).to_be_bytes());
    img.extend(side.to_be_bytes());
    img.extend(side.to_be_bytes());
    for im in images {
        img.extend(im);
    }
    std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), img).unwrap();
    let mut lab = Vec::new();
    lab.extend(0x0000_0801u32.to_be_bytes());
    lab.extend((labels.len() as u32).to_be_bytes());
    lab.extend(labels);
    std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), lab).unwrap();
}

/// 4×4 images of ten classes: a class-specific set of bright pixels plus
/// noise.
fn toy_dataset(dir: &Path) {
    use rand::Rng;
    let mut r = rng::seeded(99);
    let mut make = |n: usize| {
        let mut ims = Vec::new();
        let mut labs = Vec::new();
        for i in 0..n {
            let c = (i % 10) as u8;
            let im: Vec<u8> = (0..16u8)
                .map(|p| {
                    let bright = (p * 7 + c) % 10 < 4;
                    let base = if bright { 180 } else { 40 };
                    (base + r.gen_range(0..60)) as u8
                })
                .collect();
            ims.push(im);
            labs.push(c);
        }
        (ims, labs)
    };
    let (ti, tl) = make(200);
    write_idx(dir, "train", &ti, &tl, 4);
    let (ei, el) = make(100);
    write_idx(dir, "t10k", &ei, &el, 4);
}

fn cli(args: &[&str]) -> std::io::Result<i32> {
    let st = Command::new(env!("CARGO_BIN_EXE_rmtprune")).args(args).output()?;
    Ok(st.status.code().unwrap_or(-1))
}

/// Run every subcommand into `out` and return the report files written.
fn run_all(root: &Path, out: &Path) -> std::io::Result<Vec<(String, i32)>> {
    std::fs::create_dir_all(out)?;
    let data = root.join("toy");
    let p = |name: &str| out.join(name).display().to_string();
    let d = data.display().to_string();
    let cfg = root.join("small.toml").display().to_string();
    let prune_cfg = root.join("prune.toml").display().to_string();
    let mut codes = Vec::new();
    let mut run = |label: &str, args: Vec<String>| -> std::io::Result<()> {
        let refs: Vec<&str> = args.iter().map(String::as_str).collect();
        codes.push((label.to_string(), cli(&refs)?));
        Ok(())
    };
    let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    run("train", s(&["train", "--data", &d, "--topology", "16,12,10", "--seed", "3", "--epochs", "4", "--lr", "0.05", "--bias", "--out", &p("m.ckpt"), "--log", &p("train.csv")]))?;
    run("train-mp", s(&["train", "--data", &d, "--topology", "16,12,10", "--seed", "3", "--epochs", "4", "--mp-prune-every", "2", "--f-slope", "1/8", "--prune-config", &prune_cfg, "--out", &p("mp.ckpt"), "--log", &p("train_mp.csv")]))?;
    run("analyze", s(&["analyze", "--model", &p("m.ckpt"), "--report", &p("analyze.json")]))?;
    run("prune", s(&["prune", "--model", &p("m.ckpt"), "--config", &prune_cfg, "--cycles", "3", "--eval-data", &d, "--finetune-epochs", "1", "--seed", "3", "--out", &p("pruned.ckpt"), "--report", &p("prune.csv")]))?;
    for suite in ["perturbation", "loss-reduction", "gamma-sweep"] {
        run(suite, s(&["verify", "--suite", suite, "--config", &cfg, "--seed", "0..2", "--out", &p(&format!("{suite}.csv"))]))?;
    }
    run("noise-injection", s(&["verify", "--suite", "noise-injection", "--model", &p("m.ckpt"), "--data", &d, "--seed", "0..2", "--out", &p("noise.csv")]))?;
    run("an-scaling", s(&["verify", "--suite", "an-scaling", "--config", &cfg, "--data", &d, "--seed", "5", "--out", &p("scaling.csv")]))?;
    run("spiked", s(&["spiked", "--n-rows", "200", "--n-cols", "150", "--sigmas", "3,1.5", "--seed", "0..2", "--out", &p("spiked.csv")]))?;
    run("regress", s(&["regress", "--seed", "0..2", "--out", &p("regress")]))?;
    Ok(codes)
}

fn report_files(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).into_iter().flatten().flatten() {
            let p = e.path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("manifest.json") {
                out.push(p.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn c14_reproducible() -> Result<Outcome> {
    let io = |e: std::io::Error| rmtprune::Error::Data(e.to_string());
    let root = tempfile::tempdir().map_err(io)?;
    std::fs::create_dir_all(root.path().join("toy")).map_err(io)?;
    toy_dataset(&root.path().join("toy"));
    std::fs::write(
        root.path().join("small.toml"),
        "[planted]\nn = 200\nn_samples = 20\ninput_dim = 8\n\n[scaling]\nwidths = [8, 16]\nepochs = 1\ntrain_subset = 100\n",
    )
    .map_err(io)?;
    std::fs::write(root.path().join("prune.toml"), "min_dim = 4\nn_cycles = 3\n").map_err(io)?;
    let a = run_all(root.path(), &root.path().join("a")).map_err(io)?;
    let b = run_all(root.path(), &root.path().join("b")).map_err(io)?;
    let failed: Vec<_> = a.iter().chain(&b).filter(|(_, c)| *c != 0).map(|(l, c)| format!("{l}={c}")).collect();
    let files_a = report_files(&root.path().join("a"));
    let files_b = report_files(&root.path().join("b"));
    let differing: Vec<String> = files_a
        .iter()
        .filter(|f| std::fs::read(root.path().join("a").join(f)).ok() != std::fs::read(root.path().join("b").join(f)).ok())
        .map(|f| f.display().to_string())
        .collect();
    outcome(
        failed.is_empty() && files_a == files_b && differing.is_empty() && !files_a.is_empty(),
        format!(
            "{} subcommand runs, {} report files compared; nonzero exits {failed:?}; differing {differing:?}",
            a.len(),
            files_a.len()
        ),
    )
}

// ---------------------------------------------------------------- driver

fn main() {
    let desk_model = OnceCell::new();
    let criteria: Vec<(u32, &str, Box<dyn Fn() -> Result<Outcome> + '_>)> = vec![
        (1, "MP law and BEMA on pure noise", Box::new(c1_bema)),
        (2, "spiked singular values and overlaps", Box::new(c2_spikes)),
        (3, "time-dependent noise variance", Box::new(c3_time_variance)),
        (4, "D-transform closure", Box::new(c4_d_transform)),
        (5, "output perturbation bound", Box::new(c5_perturbation)),
        (6, "loss reduction after removing R", Box::new(c6_loss_reduction)),
        (7, "gamma sweep monotonicity", Box::new(c7_gamma_sweep)),
        (8, "noise injection on the desk MLP", Box::new(|| c8_noise(&desk_model))),
        (9, "a(N) and b(N) width scaling", Box::new(c9_scaling)),
        (10, "gradient correctness", Box::new(c10_gradients)),
        (11, "pruning pipeline on the desk MLP", Box::new(|| c11_pipeline(&desk_model))),
        (12, "MP singular-value pruning rank", Box::new(c12_mp_rank)),
        (13, "regression lab MSE ordering", Box::new(c13_regression)),
        (14, "bit-exact CLI reports", Box::new(c14_reproducible)),
    ];
    let only: Option<Vec<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let mut failures = 0;
    for (id, name, f) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t0 = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f));
        let (pass, detail) = match res {
            Ok(Ok(o)) => (o.pass, o.detail),
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(_) => (false, "panicked".to_string()),
        };
        failures += usize::from(!pass);
        println!("criterion {id:>2} {} {name} ({:.1}s): {detail}", if pass { "PASS" } else { "FAIL" }, t0.elapsed().as_secs_f64());
    }
    println!("acceptance: {} failed", failures);
    if failures > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
