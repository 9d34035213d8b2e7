//! Fourier-feature regression with noisy targets: least squares, ridge,
//! lasso and spectral pruning of the least-squares weights, scored against
//! the noiseless functions.
//!
//! Weight matrices are stored like network layers, `n_targets × n_features`,
//! so predictions are `Φ·Wᵀ` and the spectral analysis sees N = n_targets
//! rows.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{RealMatrix, Svd};
use crate::rmt::{bema_fit, Esd, DEFAULT_ALPHA, DEFAULT_BETA};
use crate::rng;

/// x ↦ (cos(πf₁x), …, cos(πf_kx), sin(πf₁x), …, sin(πf_kx)).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FourierFeatureMap {
    pub frequencies: Vec<f64>,
}

impl Default for FourierFeatureMap {
    fn default() -> Self {
        Self { frequencies: (0..=10).map(|k| 0.2 * k as f64).collect() }
    }
}

impl FourierFeatureMap {
    pub fn dim(&self) -> usize {
        2 * self.frequencies.len()
    }

    pub fn features(&self, x: f64) -> Vec<f64> {
        let pi = std::f64::consts::PI;
        let mut out: Vec<f64> = self.frequencies.iter().map(|f| (pi * f * x).cos()).collect();
        out.extend(self.frequencies.iter().map(|f| (pi * f * x).sin()));
        out
    }

    /// One row per point.
    pub fn design(&self, xs: &[f64]) -> RealMatrix {
        let d = self.dim();
        let mut data = Vec::with_capacity(xs.len() * d);
        for &x in xs {
            data.extend(self.features(x));
        }
        RealMatrix::from_vec_unchecked(xs.len(), d, data)
    }

    /// Features that vanish identically (sin at frequency 0).
    pub fn null_features(&self) -> Vec<usize> {
        let k = self.frequencies.len();
        (0..k).filter(|&i| self.frequencies[i] == 0.0).map(|i| k + i).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressionSpec {
    pub n_targets: usize,
    pub n_samples: usize,
    pub noise_scale: f64,
    pub domain: (f64, f64),
    /// Nonzero coefficients per target, on a shared random feature subset;
    /// `None` makes every coefficient nonzero.
    pub active_features: Option<usize>,
    pub eval_points: usize,
    pub ridge_grid: Vec<f64>,
    pub lasso_grid: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for RegressionSpec {
    fn default() -> Self {
        Self {
            n_targets: 50,
            n_samples: 1000,
            noise_scale: 7.0,
            // One full period of every frequency, so the features are orthogonal.
            domain: (-5.0, 5.0),
            active_features: Some(4),
            eval_points: 2001,
            ridge_grid: vec![0.1, 1.0, 10.0, 100.0, 1000.0],
            lasso_grid: vec![1.0, 3.0, 10.0, 30.0, 100.0, 300.0, 1000.0],
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            seed: 0,
        }
    }
}

impl RegressionSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    fn validate(&self, map: &FourierFeatureMap) -> Result<()> {
        if self.n_samples <= map.dim() {
            return Err(Error::Parameter(format!("need more than {} samples, got {}", map.dim(), self.n_samples)));
        }
        if self.n_targets == 0 || self.eval_points < 2 {
            return Err(Error::Parameter("need at least one target and two evaluation points".into()));
        }
        if !(self.domain.0 < self.domain.1) || !(self.noise_scale >= 0.0) {
            return Err(Error::Parameter("domain must be a nonempty interval and noise nonnegative".into()));
        }
        if let Some(k) = self.active_features {
            let usable = map.dim() - map.null_features().len();
            if k == 0 || k > usable {
                return Err(Error::Parameter(format!("active_features must lie in 1..={usable}")));
            }
        }
        if self.ridge_grid.iter().chain(&self.lasso_grid).any(|l| !(*l >= 0.0)) {
            return Err(Error::Parameter("regularization grids must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionProblem {
    pub spec: RegressionSpec,
    pub map: FourierFeatureMap,
    pub x: Vec<f64>,
    /// n_samples × n_features.
    pub phi: RealMatrix,
    /// n_samples × n_targets.
    pub y: RealMatrix,
    /// n_targets × n_features.
    pub coefficients: RealMatrix,
}

const STREAM_COEF: u64 = 0;
const STREAM_X: u64 = 1;
const STREAM_NOISE: u64 = 2;

/// Targets `y_k(x) = Σ_f c_kf φ_f(x)` sampled at uniform points of the
/// domain with N(0, noise²) noise.
pub fn generate_problem(spec: &RegressionSpec) -> Result<RegressionProblem> {
    let map = FourierFeatureMap::default();
    spec.validate(&map)?;
    let d = map.dim();
    let mut rc = rng::substream(spec.seed, STREAM_COEF);
    let null = map.null_features();
    let active: Vec<usize> = match spec.active_features {
        Some(k) => {
            let pool: Vec<usize> = (0..d).filter(|i| !null.contains(i)).collect();
            let mut chosen: Vec<usize> = pool.choose_multiple(&mut rc, k).copied().collect();
            chosen.sort_unstable();
            chosen
        }
        None => (0..d).collect(),
    };
    let mut coefficients = RealMatrix::zeros(spec.n_targets, d);
    for t in 0..spec.n_targets {
        for &j in &active {
            coefficients.set(t, j, rng::normal(&mut rc));
        }
    }
    let mut rx = rng::substream(spec.seed, STREAM_X);
    let (lo, hi) = spec.domain;
    let x: Vec<f64> = (0..spec.n_samples).map(|_| rx.gen_range(lo..hi)).collect();
    let phi = map.design(&x);
    let mut y = phi.matmul(&coefficients.transpose())?;
    if spec.noise_scale > 0.0 {
        let noise = RealMatrix::gaussian(y.rows(), y.cols(), spec.noise_scale, &mut rng::substream(spec.seed, STREAM_NOISE));
        y = y.add(&noise)?;
    }
    Ok(RegressionProblem { spec: spec.clone(), map, x, phi, y, coefficients })
}

impl RegressionProblem {
    pub fn eval_grid(&self) -> Vec<f64> {
        let (lo, hi) = self.spec.domain;
        let m = self.spec.eval_points;
        (0..m).map(|i| lo + (hi - lo) * i as f64 / (m - 1) as f64).collect()
    }

    /// Mean squared error against the noiseless targets on the evaluation
    /// grid, averaged over points and targets.
    pub fn mse(&self, weights: &RealMatrix) -> Result<f64> {
        let g = self.map.design(&self.eval_grid());
        let diff = weights.sub(&self.coefficients)?;
        let err = g.matmul(&diff.transpose())?;
        Ok(err.frobenius_sq() / err.len() as f64)
    }

    /// max σ/min σ of the design over its nonzero singular values.
    pub fn design_condition(&self) -> Result<f64> {
        design_condition(&self.phi)
    }
}

fn cutoff(s: &[f64], rows: usize, cols: usize) -> f64 {
    s.first().copied().unwrap_or(0.0) * rows.max(cols) as f64 * f64::EPSILON
}

pub fn design_condition(phi: &RealMatrix) -> Result<f64> {
    let s = phi.singular_values()?;
    let tol = cutoff(&s, phi.rows(), phi.cols());
    let kept: Vec<f64> = s.into_iter().filter(|&x| x > tol).collect();
    Ok(match (kept.first(), kept.last()) {
        (Some(a), Some(b)) => a / b,
        _ => f64::INFINITY,
    })
}

/// `W = ((ΦᵀΦ + λI)⁻¹ΦᵀY)ᵀ` through the SVD of Φ. λ = 0 gives the
/// minimum-norm least-squares solution.
pub fn fit_ridge(phi: &RealMatrix, y: &RealMatrix, lambda: f64) -> Result<RealMatrix> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("ridge lambda must be nonnegative, got {lambda}")));
    }
    if phi.rows() != y.rows() {
        return Err(Error::Dimension(format!("design has {} rows, targets {}", phi.rows(), y.rows())));
    }
    let svd = phi.thin_svd()?;
    let tol = cutoff(&svd.s, phi.rows(), phi.cols());
    // Wᵀ = V diag(s/(s²+λ)) Uᵀ Y.
    let uty = svd.u.transpose().matmul(y)?;
    let mut scaled = uty;
    for (i, &s) in svd.s.iter().enumerate() {
        let f = if s > tol { s / (s * s + lambda) } else { 0.0 };
        scaled.row_mut(i).iter_mut().for_each(|x| *x *= f);
    }
    Ok(svd.v.matmul(&scaled)?.transpose())
}

pub fn fit_unregularized(phi: &RealMatrix, y: &RealMatrix) -> Result<RealMatrix> {
    fit_ridge(phi, y, 0.0)
}

pub const LASSO_TOL: f64 = 1e-8;
pub const LASSO_MAX_SWEEPS: usize = 10_000;

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Coordinate descent on ½‖Y − ΦWᵀ‖² + λ‖W‖₁, target by target, until no
/// coordinate moves by more than 1e−8 in a sweep.
pub fn fit_lasso(phi: &RealMatrix, y: &RealMatrix, lambda: f64) -> Result<RealMatrix> {
    if !(lambda >= 0.0) {
        return Err(Error::Parameter(format!("lasso lambda must be nonnegative, got {lambda}")));
    }
    if phi.rows() != y.rows() {
        return Err(Error::Dimension(format!("design has {} rows, targets {}", phi.rows(), y.rows())));
    }
    let d = phi.cols();
    let gram = phi.transpose().matmul(phi)?;
    let corr = phi.transpose().matmul(y)?;
    let columns: Vec<Result<Vec<f64>>> = (0..y.cols())
        .into_par_iter()
        .map(|t| {
            let c: Vec<f64> = (0..d).map(|j| corr.get(j, t)).collect();
            let mut w = vec![0.0; d];
            // grad_j = c_j − Σ_k G_jk w_k, kept current.
            let mut resid = c.clone();
            for sweep in 1..=LASSO_MAX_SWEEPS {
                let mut max_change: f64 = 0.0;
                for j in 0..d {
                    let g = gram.get(j, j);
                    if g <= 0.0 {
                        continue;
                    }
                    let old = w[j];
                    let new = soft_threshold(resid[j] + g * old, lambda) / g;
                    let delta = new - old;
                    if delta != 0.0 {
                        w[j] = new;
                        for (k, r) in resid.iter_mut().enumerate() {
                            *r -= gram.get(k, j) * delta;
                        }
                        max_change = max_change.max(delta.abs());
                    }
                }
                if max_change < LASSO_TOL {
                    return Ok(w);
                }
                if sweep == LASSO_MAX_SWEEPS {
                    return Err(Error::IterationLimit { sweeps: sweep, max_change });
                }
            }
            unreachable!()
        })
        .collect();
    let mut out = RealMatrix::zeros(y.cols(), d);
    for (t, col) in columns.into_iter().enumerate() {
        out.row_mut(t).copy_from_slice(&col?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralFit {
    pub weights: RealMatrix,
    pub retained_rank: usize,
    /// `None` when the spectrum had too few nonzero values to fit.
    pub lambda_plus_hat: Option<f64>,
}

/// Least squares, then zero every singular value of the weight matrix with
/// σ/√N ≤ √λ₊ (BEMA on its spectrum). When the spectrum cannot be fitted
/// only numerically zero singular values are dropped.
pub fn fit_spectral_pruned(phi: &RealMatrix, y: &RealMatrix, alpha: f64, beta: f64) -> Result<SpectralFit> {
    let w0 = fit_unregularized(phi, y)?;
    let svd = w0.thin_svd()?;
    let (n, m) = w0.shape();
    let tol = cutoff(&svd.s, n, m);
    let esd = Esd::from_singular_values(&svd.s, n, m);
    let (threshold, lambda_plus_hat) = match bema_fit(&esd, alpha, beta) {
        Ok(fit) => ((fit.lambda_plus_hat.max(0.0) * n as f64).sqrt().max(tol), Some(fit.lambda_plus_hat)),
        Err(Error::Degenerate(_)) => (tol, None),
        Err(e) => return Err(e),
    };
    let s: Vec<f64> = svd.s.iter().map(|&x| if x > threshold { x } else { 0.0 }).collect();
    let retained_rank = s.iter().filter(|&&x| x > 0.0).count();
    let weights = Svd { u: svd.u, s, v: svd.v }.recompose();
    Ok(SpectralFit { weights, retained_rank, lambda_plus_hat })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimatorResult {
    pub estimator: String,
    /// Chosen regularization strength, if any.
    pub lambda: Option<f64>,
    pub mse: f64,
    pub retained_rank: usize,
    /// Singular values of the weight matrix, descending.
    pub singular_values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionReport {
    pub seed: u64,
    pub estimators: Vec<EstimatorResult>,
    pub warnings: Vec<String>,
}

impl RegressionReport {
    pub fn mse(&self, name: &str) -> Option<f64> {
        self.estimators.iter().find(|e| e.estimator == name).map(|e| e.mse)
    }
}

pub const ESTIMATORS: [&str; 4] = ["none", "ridge", "lasso", "pruning"];

fn numeric_rank(s: &[f64], rows: usize, cols: usize) -> usize {
    let tol = cutoff(s, rows, cols);
    s.iter().filter(|&&x| x > tol).count()
}

fn result(name: &str, lambda: Option<f64>, w: &RealMatrix, p: &RegressionProblem) -> Result<EstimatorResult> {
    let s = w.singular_values()?;
    Ok(EstimatorResult {
        estimator: name.into(),
        lambda,
        mse: p.mse(w)?,
        retained_rank: numeric_rank(&s, w.rows(), w.cols()),
        singular_values: s,
    })
}

/// Best of a grid by ground-truth MSE; ties go to the first entry.
fn best_on_grid(
    p: &RegressionProblem,
    grid: &[f64],
    fit: impl Fn(f64) -> Result<RealMatrix>,
) -> Result<Option<(f64, RealMatrix, f64)>> {
    let mut best: Option<(f64, RealMatrix, f64)> = None;
    for &l in grid {
        let w = fit(l)?;
        let mse = p.mse(&w)?;
        if best.as_ref().is_none_or(|b| mse < b.2) {
            best = Some((l, w, mse));
        }
    }
    Ok(best)
}

/// MSE of the four estimators. Ridge and lasso take the grid value with
/// the lowest ground-truth MSE.
pub fn mse_report(p: &RegressionProblem) -> Result<RegressionReport> {
    let mut warnings = Vec::new();
    let cond = p.design_condition()?;
    if cond > 1e12 {
        warnings.push(format!("design condition number {cond:.3e} exceeds 1e12"));
    }
    let mut estimators = Vec::with_capacity(4);
    estimators.push(result("none", None, &fit_unregularized(&p.phi, &p.y)?, p)?);
    match best_on_grid(p, &p.spec.ridge_grid, |l| fit_ridge(&p.phi, &p.y, l))? {
        Some((l, w, _)) => estimators.push(result("ridge", Some(l), &w, p)?),
        None => warnings.push("empty ridge grid".into()),
    }
    match best_on_grid(p, &p.spec.lasso_grid, |l| fit_lasso(&p.phi, &p.y, l))? {
        Some((l, w, _)) => estimators.push(result("lasso", Some(l), &w, p)?),
        None => warnings.push("empty lasso grid".into()),
    }
    let pruned = fit_spectral_pruned(&p.phi, &p.y, p.spec.alpha, p.spec.beta)?;
    let mut r = result("pruning", None, &pruned.weights, p)?;
    r.retained_rank = pruned.retained_rank;
    estimators.push(r);
    Ok(RegressionReport { seed: p.spec.seed, estimators, warnings })
}

/// [`mse_report`] for each seed, in seed order.
pub fn regression_study(spec: &RegressionSpec, seeds: &[u64]) -> Result<Vec<RegressionReport>> {
    seeds
        .par_iter()
        .map(|&s| generate_problem(&spec.with_seed(s)).and_then(|p| mse_report(&p)))
        .collect()
}

/// (σ, fraction of singular values ≤ σ) for the ascending spectrum.
pub fn cumulative_spectrum(singular_values: &[f64]) -> Vec<(f64, f64)> {
    let mut s = singular_values.to_vec();
    s.sort_unstable_by(f64::total_cmp);
    let m = s.len() as f64;
    s.iter().enumerate().map(|(i, &x)| (x, (i + 1) as f64 / m)).collect()
}
