//! Runnable checks of the noise-removal results: the output-perturbation
//! bound a(N, s) and its b(N) variant, the Borell–TIS tail bound, loss
//! reduction when the random part of the middle layer is removed, the
//! γ-sweep, noise injection, and the width-scaling experiment.

use std::time::Instant;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{gemm, norm2, RealMatrix};
use crate::matrixio::LabeledDataset;
use crate::nn::{inject_noise, train, Activation, Init, Layer, MLPModel, TrainConfig, Weight};
use crate::rng;
use crate::spiked::{generate_spiked, DeformedSample, SpikedSpec};

/// ‖W₃‖·‖W₁s‖₂ / N^{3/8}.
pub fn a_simple(n: f64, w3_norm: f64, w1s: f64) -> f64 {
    w3_norm * w1s / n.powf(1.5 / 4.0)
}

/// √(2 log N / N)·‖W₁s‖₂‖W₃‖ + a_simple.
pub fn a_full(n: f64, w3_norm: f64, w1s: f64) -> f64 {
    (2.0 * n.ln() / n).sqrt() * w1s * w3_norm + a_simple(n, w3_norm, w1s)
}

/// a_full with every N replaced by N².
pub fn b_full(n: f64, w3_norm: f64, w1s: f64) -> f64 {
    a_full(n * n, w3_norm, w1s)
}

/// 2·exp(−N^{1/4}/2), the failure probability attached to a(N, s).
pub fn deviation_probability(n: f64) -> f64 {
    2.0 * (-n.powf(0.25) / 2.0).exp()
}

/// Borell–TIS: for n centred Gaussians of variance v,
/// P(max|Xᵢ| > √(2 v log n) + t) ≤ 2·exp(−t²/(2v)).
pub fn borell_tis_bound(n: usize, variance: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) || !(variance > 0.0) || n == 0 {
        return Err(Error::Parameter(format!("need n ≥ 1, variance > 0, t > 0 (got {n}, {variance}, {t})")));
    }
    Ok((2.0 * (-t * t / (2.0 * variance)).exp()).min(1.0))
}

/// The level √(2 v log n) the Borell–TIS deviation t is measured from.
pub fn borell_tis_level(n: usize, variance: f64) -> f64 {
    (2.0 * variance * (n as f64).ln()).sqrt()
}

/// Fraction of `draws` vectors of n i.i.d. N(0, v) whose max |entry|
/// exceeds √(2 v log n) + t.
pub fn borell_tis_exceedance(n: usize, variance: f64, t: f64, draws: usize, seed: u64) -> f64 {
    let level = borell_tis_level(n, variance) + t;
    let std = variance.sqrt();
    let mut r = rng::seeded(seed);
    let mut hits = 0usize;
    for _ in 0..draws {
        let mut max: f64 = 0.0;
        for _ in 0..n {
            max = max.max((std * rng::normal(&mut r)).abs());
        }
        hits += (max > level) as usize;
    }
    hits as f64 / draws as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBound {
    pub n: usize,
    /// Max column absolute sum of W₃.
    pub w3_col_norm: f64,
    /// Max row absolute sum of W₃.
    pub w3_row_norm: f64,
    /// max over the dataset of ‖W₁s‖₂.
    pub w1s_max: f64,
    /// a(N) terms with the column-sum norm.
    pub a_simple: f64,
    pub a_full: f64,
    pub b_full: f64,
    /// a_full with the row-sum norm.
    pub a_full_row: f64,
    pub prob_bound: f64,
}

fn dense3(model: &MLPModel) -> Result<[&RealMatrix; 3]> {
    let bad = |why: &str| Error::Contract(format!("perturbation bounds need a bias-free dense 3-layer net: {why}"));
    if model.layers.len() != 3 {
        return Err(bad(&format!("{} layers", model.layers.len())));
    }
    let mut ws = Vec::with_capacity(3);
    for l in &model.layers {
        if l.bias.is_some() {
            return Err(bad("layer has a bias"));
        }
        match &l.weight {
            Weight::Dense(w) => ws.push(w),
            Weight::Split { .. } => return Err(bad("layer is split")),
        }
    }
    if ws[1].rows() != ws[1].cols() {
        return Err(bad("middle layer is not square"));
    }
    Ok([ws[0], ws[1], ws[2]])
}

/// ‖W₁s‖₂ for every row s of `x`.
fn first_layer_norms(w1: &RealMatrix, x: &RealMatrix) -> Vec<f64> {
    const CHUNK: usize = 512;
    let mut out = Vec::with_capacity(x.rows());
    let mut start = 0;
    while start < x.rows() {
        let end = (start + CHUNK).min(x.rows());
        let block = x.row_block(start, end);
        let mut z = RealMatrix::zeros(end - start, w1.rows());
        gemm(&mut z, block.view(), w1.view().transpose(), 1.0, false);
        out.extend((0..z.rows()).map(|i| norm2(z.row(i))));
        start = end;
    }
    out
}

pub fn perturbation_bounds(model: &MLPModel, data: &LabeledDataset) -> Result<PerturbationBound> {
    let [w1, w2, w3] = dense3(model)?;
    if data.is_empty() {
        return Err(Error::Domain("empty dataset".into()));
    }
    if data.n_features() != w1.cols() {
        return Err(Error::Dimension(format!("data has {} features, W₁ expects {}", data.n_features(), w1.cols())));
    }
    let w1s_max = first_layer_norms(w1, &data.features).into_iter().fold(0.0, f64::max);
    let n = w2.rows() as f64;
    let (col, row) = (w3.max_col_abs_sum(), w3.max_row_abs_sum());
    Ok(PerturbationBound {
        n: w2.rows(),
        w3_col_norm: col,
        w3_row_norm: row,
        w1s_max,
        a_simple: a_simple(n, col, w1s_max),
        a_full: a_full(n, col, w1s_max),
        b_full: b_full(n, col, w1s_max),
        a_full_row: a_full(n, row, w1s_max),
        prob_bound: deviation_probability(n),
    })
}

/// A 3-layer ReLU net `λ∘W₃∘λ∘W₂∘λ∘W₁` whose middle layer is a planted
/// sample `W₂ = R + S`, with data on which S carries the signal.
///
/// Inputs are Gaussian clusters around `n_classes` centres in
/// `input_dim` dimensions. W₁ = V·B maps them into the span of the right
/// singular vectors of S (B Gaussian), and row k of W₃ is the normalised
/// S-path hidden code of centre k scaled by `w3_scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedNetSpec {
    pub n: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub planted_sigmas: Vec<f64>,
    pub noise_scale: f64,
    pub cluster_spread: f64,
    pub n_samples: usize,
    pub w3_scale: f64,
}

impl Default for PlantedNetSpec {
    fn default() -> Self {
        Self {
            n: 2000,
            input_dim: 32,
            // A rank-2 signal separates about r + 1 clusters; with more
            // classes most samples sit near a decision boundary.
            n_classes: 3,
            planted_sigmas: vec![3.0, 2.0],
            noise_scale: 1.0,
            cluster_spread: 0.2,
            n_samples: 100,
            w3_scale: 1.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PlantedNet {
    pub w1: RealMatrix,
    pub middle: DeformedSample,
    pub w3: RealMatrix,
    pub data: LabeledDataset,
}

const STREAM_MIX: u64 = 10;
const STREAM_CENTRES: u64 = 11;
const STREAM_DATA: u64 = 12;

pub fn planted_net(spec: &PlantedNetSpec, seed: u64) -> Result<PlantedNet> {
    if spec.n_classes < 2 || spec.input_dim == 0 || spec.n_samples == 0 || !(spec.w3_scale > 0.0) {
        return Err(Error::Parameter("planted net needs ≥ 2 classes, inputs, samples and a positive W₃ scale".into()));
    }
    if spec.planted_sigmas.is_empty() {
        return Err(Error::Parameter("planted net needs at least one spike".into()));
    }
    let middle = generate_spiked(&SpikedSpec {
        n_rows: spec.n,
        n_cols: spec.n,
        planted_sigmas: spec.planted_sigmas.clone(),
        noise_scale: spec.noise_scale,
        seed,
    })?;
    let r = spec.planted_sigmas.len();
    let mix = RealMatrix::gaussian(r, spec.input_dim, 1.0, &mut rng::substream(seed, STREAM_MIX));
    let w1 = middle.v.matmul(&mix)?;
    let centres = RealMatrix::gaussian(spec.n_classes, spec.input_dim, 1.0, &mut rng::substream(seed, STREAM_CENTRES));
    let relu = |m: RealMatrix| m.map(|x| x.max(0.0));
    let codes = relu(relu(centres.matmul(&w1.transpose())?).matmul(&middle.s.transpose())?);
    let mut w3 = codes;
    for k in 0..w3.rows() {
        let nrm = norm2(w3.row(k));
        if nrm == 0.0 {
            return Err(Error::Degenerate(format!("class {k} has an all-zero hidden code")));
        }
        w3.row_mut(k).iter_mut().for_each(|x| *x *= spec.w3_scale / nrm);
    }
    let mut r = rng::substream(seed, STREAM_DATA);
    let labels: Vec<usize> = (0..spec.n_samples).map(|_| r.gen_range(0..spec.n_classes)).collect();
    let noise = RealMatrix::gaussian(spec.n_samples, spec.input_dim, spec.cluster_spread, &mut r);
    let features = RealMatrix::from_fn(spec.n_samples, spec.input_dim, |i, j| centres.get(labels[i], j) + noise.get(i, j));
    let data = LabeledDataset::new(features, labels, spec.n_classes)?;
    Ok(PlantedNet { w1, middle, w3, data })
}

impl PlantedNet {
    pub fn n(&self) -> usize {
        self.middle.w.rows()
    }

    pub fn model_with(&self, w2: RealMatrix) -> MLPModel {
        let layer = |w: RealMatrix| Layer { weight: Weight::Dense(w), bias: None, mask: None };
        MLPModel::new(vec![layer(self.w1.clone()), layer(w2), layer(self.w3.clone())], Activation::Relu, true)
            .expect("planted shapes are consistent")
    }

    /// The net with W₂ = R + S.
    pub fn model_w(&self) -> MLPModel {
        self.model_with(self.middle.w.clone())
    }

    /// The net with W₂ = S.
    pub fn model_s(&self) -> MLPModel {
        self.model_with(self.middle.s.clone())
    }

    /// The net with W₂ = γR + S.
    pub fn model_gamma(&self, gamma: f64) -> MLPModel {
        self.model_with(self.middle.with_noise_fraction(gamma))
    }
}

/// max over components of |X(s; a) − X(s; b)| for every sample.
pub fn output_deviations(a: &MLPModel, b: &MLPModel, data: &LabeledDataset) -> Result<Vec<f64>> {
    let (za, zb) = (a.forward_batch(&data.features)?, b.forward_batch(&data.features)?);
    Ok((0..za.rows())
        .map(|i| za.row(i).iter().zip(zb.row(i)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationRow {
    pub seed: u64,
    pub samples: usize,
    pub max_deviation: f64,
    /// Largest per-sample bound a_full(N, s) with the row-sum norm.
    pub max_bound: f64,
    /// Samples whose deviation exceeds a_full(N, s), row-sum norm.
    pub violations: usize,
    /// The same with the column-sum norm.
    pub violations_col_norm: usize,
    /// Deviation between the γ = 0 net and the S net.
    pub deviation_without_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub rows: Vec<PerturbationRow>,
    pub prob_bound: f64,
    pub violation_rate: f64,
    pub violation_rate_col_norm: f64,
}

/// Compare the W and S nets sample by sample against a_full(N, s).
pub fn output_perturbation_check(spec: &PlantedNetSpec, seeds: &[u64]) -> Result<PerturbationReport> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let net = planted_net(spec, seed)?;
        let n = net.n() as f64;
        let (mw, ms) = (net.model_w(), net.model_s());
        let dev = output_deviations(&mw, &ms, &net.data)?;
        let w1s = first_layer_norms(&net.w1, &net.data.features);
        let (row, col) = (net.w3.max_row_abs_sum(), net.w3.max_col_abs_sum());
        let mut r = PerturbationRow {
            seed,
            samples: dev.len(),
            max_deviation: dev.iter().copied().fold(0.0, f64::max),
            max_bound: 0.0,
            violations: 0,
            violations_col_norm: 0,
            deviation_without_noise: output_deviations(&net.model_gamma(0.0), &ms, &net.data)?
                .into_iter()
                .fold(0.0, f64::max),
        };
        for (d, x) in dev.iter().zip(&w1s) {
            let bound = a_full(n, row, *x);
            r.max_bound = r.max_bound.max(bound);
            r.violations += (*d > bound) as usize;
            r.violations_col_norm += (*d > a_full(n, col, *x)) as usize;
        }
        rows.push(r);
    }
    let total: usize = rows.iter().map(|r| r.samples).sum();
    let rate = |f: fn(&PerturbationRow) -> usize| rows.iter().map(f).sum::<usize>() as f64 / total.max(1) as f64;
    Ok(PerturbationReport {
        prob_bound: deviation_probability(spec.n as f64),
        violation_rate: rate(|r| r.violations),
        violation_rate_col_norm: rate(|r| r.violations_col_norm),
        rows,
    })
}

fn l2_config(mu: f64) -> TrainConfig {
    TrainConfig { mu1: 0.0, mu2: mu, ..TrainConfig::default() }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReductionRow {
    pub seed: u64,
    pub loss_w: f64,
    pub loss_s: f64,
    /// μ‖R‖_F².
    pub mu_r_norm_sq: f64,
    /// (1 + ε)(L(W) − μ‖R‖_F²).
    pub rhs: f64,
    pub ce_w: f64,
    pub ce_s: f64,
    pub ce_delta: f64,
    pub acc_w: f64,
    pub acc_s: f64,
    pub acc_delta: f64,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReductionReport {
    pub rows: Vec<LossReductionRow>,
    pub pass_fraction: f64,
    pub max_abs_acc_delta: f64,
}

/// Losses are cross-entropy plus μ·Σ‖W_l‖_F² over all three layers.
pub fn loss_reduction_check(spec: &PlantedNetSpec, mu: f64, epsilon: f64, seeds: &[u64]) -> Result<LossReductionReport> {
    if !(mu >= 0.0) || !(epsilon >= 0.0) {
        return Err(Error::Parameter("mu and epsilon must be nonnegative".into()));
    }
    let cfg = l2_config(mu);
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let net = planted_net(spec, seed)?;
        let (mw, ms) = (net.model_w(), net.model_s());
        let (lw, ls) = (mw.loss(&net.data, &cfg, 0)?, ms.loss(&net.data, &cfg, 0)?);
        let (acc_w, acc_s) = (mw.accuracy(&net.data)?, ms.accuracy(&net.data)?);
        let mu_r = mu * net.middle.r.frobenius_sq();
        let rhs = (1.0 + epsilon) * (lw.total - mu_r);
        rows.push(LossReductionRow {
            seed,
            loss_w: lw.total,
            loss_s: ls.total,
            mu_r_norm_sq: mu_r,
            rhs,
            ce_w: lw.cross_entropy,
            ce_s: ls.cross_entropy,
            ce_delta: ls.cross_entropy - lw.cross_entropy,
            acc_w,
            acc_s,
            acc_delta: acc_s - acc_w,
            pass: ls.total < rhs,
        });
    }
    let pass_fraction = rows.iter().filter(|r| r.pass).count() as f64 / rows.len().max(1) as f64;
    let max_abs_acc_delta = rows.iter().map(|r| r.acc_delta.abs()).fold(0.0, f64::max);
    Ok(LossReductionReport { rows, pass_fraction, max_abs_acc_delta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub seed: u64,
    pub gamma: f64,
    pub loss: f64,
    pub cross_entropy: f64,
    pub reg_term: f64,
    /// μ(γ²‖R‖² + 2γ⟨R,S⟩ + ‖S‖² + ‖W₁‖² + ‖W₃‖²).
    pub reg_term_expanded: f64,
    /// Regularization drop from the first grid point.
    pub reg_drop: f64,
    /// μ(γ₀² − γ²)‖R‖² + 2μ(γ₀ − γ)⟨R,S⟩.
    pub reg_drop_predicted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSweepReport {
    pub rows: Vec<GammaRow>,
    /// Per seed: loss nonincreasing along the grid.
    pub nonincreasing: Vec<bool>,
    /// Per seed: loss strictly decreasing along the grid.
    pub strictly_decreasing: Vec<bool>,
    pub nonincreasing_fraction: f64,
    pub strictly_decreasing_fraction: f64,
}

/// Total loss of the W₂(γ) = γR + S net along a descending grid in [0, 1].
pub fn gamma_sweep(spec: &PlantedNetSpec, mu: f64, grid: &[f64], seeds: &[u64]) -> Result<GammaSweepReport> {
    if grid.is_empty() || grid.iter().any(|g| !(0.0..=1.0).contains(g)) || grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(Error::Parameter("gamma grid must be strictly descending within [0, 1]".into()));
    }
    let cfg = l2_config(mu);
    let mut rows = Vec::new();
    let (mut nonincreasing, mut strictly) = (Vec::new(), Vec::new());
    for &seed in seeds {
        let net = planted_net(spec, seed)?;
        let r2 = net.middle.r.frobenius_sq();
        let s2 = net.middle.s.frobenius_sq();
        let rs = net.middle.r.inner(&net.middle.s)?;
        let outer = net.w1.frobenius_sq() + net.w3.frobenius_sq();
        let g0 = grid[0];
        let mut first_reg = None;
        let mut losses = Vec::with_capacity(grid.len());
        for &gamma in grid {
            let l = net.model_gamma(gamma).loss(&net.data, &cfg, 0)?;
            let reg0 = *first_reg.get_or_insert(l.l2_term);
            rows.push(GammaRow {
                seed,
                gamma,
                loss: l.total,
                cross_entropy: l.cross_entropy,
                reg_term: l.l2_term,
                reg_term_expanded: mu * (gamma * gamma * r2 + 2.0 * gamma * rs + s2 + outer),
                reg_drop: reg0 - l.l2_term,
                reg_drop_predicted: mu * (g0 * g0 - gamma * gamma) * r2 + 2.0 * mu * (g0 - gamma) * rs,
            });
            losses.push(l.total);
        }
        nonincreasing.push(losses.windows(2).all(|w| w[1] <= w[0]));
        strictly.push(losses.windows(2).all(|w| w[1] < w[0]));
    }
    let frac = |v: &[bool]| v.iter().filter(|b| **b).count() as f64 / v.len().max(1) as f64;
    Ok(GammaSweepReport {
        nonincreasing_fraction: frac(&nonincreasing),
        strictly_decreasing_fraction: frac(&strictly),
        rows,
        nonincreasing,
        strictly_decreasing: strictly,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRow {
    pub eps: f64,
    pub seed: u64,
    pub accuracy: f64,
    pub cross_entropy: f64,
    /// Cross-entropy + μ·Σ‖W‖_F².
    pub l2_loss: f64,
    pub d_accuracy: f64,
    pub d_cross_entropy: f64,
    pub d_l2_loss: f64,
}

/// Add N(0, ε) noise to `layers` for every (ε, seed) and record accuracy,
/// cross-entropy and the μ-weighted L2 loss against the clean model.
pub fn noise_injection_experiment(
    model: &MLPModel,
    data: &LabeledDataset,
    layers: &[usize],
    eps_grid: &[f64],
    seeds: &[u64],
    mu: f64,
) -> Result<Vec<NoiseRow>> {
    let cfg = l2_config(mu);
    let (ce0, acc0) = model.evaluate(data)?;
    let l0 = ce0 + model.loss_regularizer(&cfg)?;
    let mut rows = Vec::with_capacity(eps_grid.len() * seeds.len());
    for &eps in eps_grid {
        for &seed in seeds {
            let noisy = inject_noise(model, layers, eps, &mut rng::seeded(seed))?;
            let (ce, acc) = noisy.evaluate(data)?;
            let l = ce + noisy.loss_regularizer(&cfg)?;
            rows.push(NoiseRow {
                eps,
                seed,
                accuracy: acc,
                cross_entropy: ce,
                l2_loss: l,
                d_accuracy: acc - acc0,
                d_cross_entropy: ce - ce0,
                d_l2_loss: l - l0,
            });
        }
    }
    Ok(rows)
}

/// Initialisation and input scale of a width-scaling run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalingProtocol {
    /// Weights N(0, 1/fan_in), largest input norm 0.1.
    A,
    /// Weights N(0, 1/fan_in²), largest input norm 10.
    B,
}

impl ScalingProtocol {
    pub fn init(self) -> Init {
        match self {
            ScalingProtocol::A => Init::FanIn,
            ScalingProtocol::B => Init::FanInSquared,
        }
    }

    pub fn max_input_norm(self) -> f64 {
        match self {
            ScalingProtocol::A => 0.1,
            ScalingProtocol::B => 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub widths: Vec<usize>,
    pub protocols: Vec<ScalingProtocol>,
    pub epochs: usize,
    pub learning_rate: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub batch_size: usize,
    pub train_subset: usize,
    pub seed: u64,
    /// Stop before a width whose predicted cost would overrun this.
    pub time_budget_secs: Option<f64>,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            widths: vec![500, 1000, 1500, 2000, 3000, 4000, 5000, 7000, 10000, 20000],
            protocols: vec![ScalingProtocol::A, ScalingProtocol::B],
            epochs: 10,
            learning_rate: 1e-4,
            mu1: 1e-7,
            mu2: 1e-7,
            batch_size: 128,
            train_subset: 10_000,
            seed: 0,
            time_budget_secs: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub protocol: ScalingProtocol,
    pub n: usize,
    pub a_simple: f64,
    pub a_full: f64,
    pub b_full: f64,
    pub w3_col_norm: f64,
    pub w1s_max: f64,
    pub test_accuracy: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingRun {
    pub rows: Vec<ScalingRow>,
    /// Widths skipped because of the time budget.
    pub skipped: Vec<usize>,
}

fn scale_features(d: &LabeledDataset, factor: f64) -> LabeledDataset {
    let mut out = d.clone();
    out.features = d.features.scale(factor);
    out
}

/// Train `[in, N, N, K]` ReLU nets for each width and protocol and record
/// a(N), b(N) after training. The test set is scaled by the training
/// set's factor.
pub fn an_scaling(cfg: &ScalingConfig, train_data: &LabeledDataset, test: Option<&LabeledDataset>) -> Result<ScalingRun> {
    if cfg.widths.windows(2).any(|w| w[1] <= w[0]) || cfg.widths.is_empty() {
        return Err(Error::Parameter("widths must be strictly ascending".into()));
    }
    let data = train_data.take(cfg.train_subset.min(train_data.len()));
    let max_norm = (0..data.len()).map(|i| norm2(data.features.row(i))).fold(0.0, f64::max);
    if max_norm == 0.0 {
        return Err(Error::Degenerate("training inputs are all zero".into()));
    }
    let start = Instant::now();
    let cost = |n: usize| (data.n_features() * n + n * n + n * data.n_classes) as f64;
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    let mut last: Option<(usize, f64)> = None;
    for (i, &n) in cfg.widths.iter().enumerate() {
        if let (Some(budget), Some((ln, secs))) = (cfg.time_budget_secs, last) {
            let predicted = secs * cost(n) / cost(ln);
            if start.elapsed().as_secs_f64() + predicted > budget {
                skipped.extend_from_slice(&cfg.widths[i..]);
                break;
            }
        }
        let t0 = Instant::now();
        for (p, &protocol) in cfg.protocols.iter().enumerate() {
            let factor = protocol.max_input_norm() / max_norm;
            let train_set = scale_features(&data, factor);
            let test_set = test.map(|t| scale_features(t, factor));
            let topology = [data.n_features(), n, n, data.n_classes];
            let seed = rng::substream(cfg.seed, (n * 4 + p) as u64).gen::<u64>();
            let mut model = MLPModel::init(&topology, Activation::Relu, false, protocol.init(), false, &mut rng::seeded(seed))?;
            let tc = TrainConfig {
                learning_rate: cfg.learning_rate,
                mu1: cfg.mu1,
                mu2: cfg.mu2,
                epochs: cfg.epochs,
                batch_size: cfg.batch_size,
                seed,
                log_metrics: false,
                ..TrainConfig::default()
            };
            let tp = Instant::now();
            train(&mut model, &train_set, None, &tc, &mut [])?;
            let b = perturbation_bounds(&model, &train_set)?;
            let test_accuracy = test_set.as_ref().map(|t| model.accuracy(t)).transpose()?;
            rows.push(ScalingRow {
                protocol,
                n,
                a_simple: b.a_simple,
                a_full: b.a_full,
                b_full: b.b_full,
                w3_col_norm: b.w3_col_norm,
                w1s_max: b.w1s_max,
                test_accuracy,
                seconds: tp.elapsed().as_secs_f64(),
            });
        }
        last = Some((n, t0.elapsed().as_secs_f64()));
    }
    Ok(ScalingRun { rows, skipped })
}

/// a(N), b(N) of freshly initialised `[in, N, N, K]` nets under each
/// protocol. Only W₁ and W₃ enter the bounds, so the N × N middle layer is
/// never drawn and the full width grid is cheap.
pub fn an_scaling_at_init(cfg: &ScalingConfig, train_data: &LabeledDataset) -> Result<Vec<ScalingRow>> {
    let data = train_data.take(cfg.train_subset.min(train_data.len()));
    let max_norm = (0..data.len()).map(|i| norm2(data.features.row(i))).fold(0.0, f64::max);
    if max_norm == 0.0 {
        return Err(Error::Degenerate("training inputs are all zero".into()));
    }
    let mut rows = Vec::new();
    for &n in &cfg.widths {
        for (p, &protocol) in cfg.protocols.iter().enumerate() {
            let t0 = Instant::now();
            let x = data.features.scale(protocol.max_input_norm() / max_norm);
            let init = protocol.init();
            let stream = (n * 4 + p) as u64;
            let w1 = RealMatrix::gaussian(n, data.n_features(), init.std(data.n_features()), &mut rng::substream(cfg.seed, stream));
            let w3 = RealMatrix::gaussian(data.n_classes, n, init.std(n), &mut rng::substream(cfg.seed ^ 0x5eed, stream));
            let w1s_max = first_layer_norms(&w1, &x).into_iter().fold(0.0, f64::max);
            let col = w3.max_col_abs_sum();
            let nf = n as f64;
            rows.push(ScalingRow {
                protocol,
                n,
                a_simple: a_simple(nf, col, w1s_max),
                a_full: a_full(nf, col, w1s_max),
                b_full: b_full(nf, col, w1s_max),
                w3_col_norm: col,
                w1s_max,
                test_accuracy: None,
                seconds: t0.elapsed().as_secs_f64(),
            });
        }
    }
    Ok(rows)
}
