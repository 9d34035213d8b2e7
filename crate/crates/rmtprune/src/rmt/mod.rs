//! Marchenko–Pastur law, empirical spectra, the BEMA edge estimator and the
//! D-transform of the noise singular-value law.
//!
//! Integrals over the MP bulk use the substitution
//! `x = λ₋ + w·sin²(θ/2)`, `w = λ₊ − λ₋`, `θ ∈ [0, π]`, under which the
//! density (and the D-transform integrand, even at the edge) is a smooth
//! trigonometric function of θ.

mod tw_table;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::RealMatrix;
use crate::quad::integrate;

pub const DEFAULT_ALPHA: f64 = 0.25;
pub const DEFAULT_BETA: f64 = 0.8;
pub const DEFAULT_TAU: f64 = 0.3;

const CDF_TOL: f64 = 1e-11;
const D_TOL: f64 = 1e-11;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MPParams {
    pub sigma2: f64,
    pub c: f64,
    pub lambda_minus: f64,
    pub lambda_plus: f64,
}

impl MPParams {
    pub fn new(sigma2: f64, c: f64) -> Result<Self> {
        if !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(Error::Parameter(format!("MP variance must be positive, got {sigma2}")));
        }
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::Parameter(format!("MP aspect ratio must be positive, got {c}")));
        }
        let r = c.sqrt();
        Ok(Self {
            sigma2,
            c,
            lambda_minus: sigma2 * (1.0 - r).powi(2),
            lambda_plus: sigma2 * (1.0 + r).powi(2),
        })
    }

    /// Point mass at zero, present when c > 1.
    pub fn atom(&self) -> f64 {
        (1.0 - 1.0 / self.c).max(0.0)
    }

    /// Mass of the continuous part.
    fn bulk_mass(&self) -> f64 {
        1.0 - self.atom()
    }

    fn width(&self) -> f64 {
        self.lambda_plus - self.lambda_minus
    }

    fn x_of(&self, theta: f64) -> f64 {
        self.lambda_minus + self.width() * (0.5 * theta).sin().powi(2)
    }

    fn theta_of(&self, x: f64) -> f64 {
        let u = ((x - self.lambda_minus) / self.width()).clamp(0.0, 1.0);
        2.0 * u.sqrt().asin()
    }

    /// Bulk density in θ, normalised to integrate to one.
    fn bulk_density_theta(&self, theta: f64) -> f64 {
        let (s, c) = (0.5 * theta).sin_cos();
        let w = self.width();
        // At λ₋ = 0 the factor s²/x is w⁻¹ exactly; avoid 0/0 at θ = 0.
        let s2_over_x = if self.lambda_minus == 0.0 { 1.0 / w } else { s * s / self.x_of(theta) };
        w * w * s2_over_x * c * c / (2.0 * PI * self.sigma2 * self.c * self.bulk_mass())
    }

    /// CDF of the continuous part alone (the law of the nonzero eigenvalues).
    pub fn bulk_cdf(&self, x: f64) -> f64 {
        if x <= self.lambda_minus {
            return 0.0;
        }
        if x >= self.lambda_plus {
            return 1.0;
        }
        let t = self.theta_of(x);
        integrate(&|th| self.bulk_density_theta(th), 0.0, t, CDF_TOL).clamp(0.0, 1.0)
    }

    /// Inverse of [`bulk_cdf`](Self::bulk_cdf) by bisection.
    pub fn bulk_quantile(&self, q: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::Domain(format!("probability {q} outside [0, 1]")));
        }
        let (mut lo, mut hi) = (self.lambda_minus, self.lambda_plus);
        let tol = 1e-10 * self.lambda_plus.max(1.0);
        while hi - lo > tol {
            let mid = 0.5 * (lo + hi);
            if self.bulk_cdf(mid) < q {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }
}

pub fn mp_pdf(x: f64, p: &MPParams) -> f64 {
    if x <= p.lambda_minus || x >= p.lambda_plus || x <= 0.0 {
        return 0.0;
    }
    ((p.lambda_plus - x) * (x - p.lambda_minus)).sqrt() / (2.0 * PI * p.sigma2 * p.c * x)
}

/// Full MP CDF including the atom `max(0, 1 − 1/c)` at zero.
pub fn mp_cdf(x: f64, p: &MPParams) -> f64 {
    if x < 0.0 {
        return 0.0;
    }
    p.atom() + p.bulk_mass() * p.bulk_cdf(x)
}

pub fn mp_quantile(q: f64, p: &MPParams) -> Result<f64> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::Domain(format!("probability {q} outside [0, 1]")));
    }
    let atom = p.atom();
    if q <= atom {
        return Ok(0.0);
    }
    p.bulk_quantile(((q - atom) / p.bulk_mass()).min(1.0))
}

/// Eigenvalues of `X = (1/N) WᵀW` restricted to its min(N, M) largest,
/// i.e. `σᵢ(W)²/N`, ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Esd {
    pub eigenvalues: Vec<f64>,
    pub n_rows: usize,
    pub n_cols: usize,
}

impl Esd {
    /// Aspect ratio c = M/N.
    pub fn c(&self) -> f64 {
        self.n_cols as f64 / self.n_rows as f64
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    pub fn from_singular_values(sv: &[f64], n_rows: usize, n_cols: usize) -> Self {
        let n = n_rows as f64;
        let mut eigenvalues: Vec<f64> = sv.iter().map(|s| s * s / n).collect();
        eigenvalues.sort_by(f64::total_cmp);
        Self { eigenvalues, n_rows, n_cols }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { eigenvalues: self.eigenvalues.iter().map(|x| a * x).collect(), ..self.clone() }
    }
}

pub fn compute_esd(w: &RealMatrix) -> Result<Esd> {
    if w.is_empty() {
        return Err(Error::Degenerate("empty matrix has no spectrum".into()));
    }
    Ok(Esd::from_singular_values(&w.singular_values()?, w.rows(), w.cols()))
}

/// The (1 − β) quantile of the Tracy–Widom β=1 law, by monotone linear
/// interpolation of the bundled table (linear extrapolation beyond its
/// [0.005, 0.995] range).
pub fn tw_quantile(beta: f64) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::Domain(format!("beta {beta} outside (0, 1)")));
    }
    let p = 1.0 - beta;
    let t = &tw_table::TW1_TABLE;
    let i = t.partition_point(|&(q, _)| q < p);
    if i < t.len() && t[i].0 == p {
        return Ok(t[i].1);
    }
    let i = i.clamp(1, t.len() - 1);
    let ((p0, q0), (p1, q1)) = (t[i - 1], t[i]);
    Ok(q0 + (q1 - q0) * (p - p0) / (p1 - p0))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MPFitResult {
    pub sigma2_hat: f64,
    pub lambda_plus_hat: f64,
    pub c: f64,
    pub fit_error: f64,
    pub accepted: bool,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl MPFitResult {
    pub fn params(&self) -> Result<MPParams> {
        MPParams::new(self.sigma2_hat, self.c)
    }

    pub fn with_tau(mut self, tau: f64) -> Self {
        self.tau = tau;
        self.accepted = self.fit_error <= tau;
        self
    }
}

/// 1-based index window [⌈αm⌉, ⌊(1−α)m⌋], clipped to ≥ 1.
fn trim_window(m: usize, alpha: f64) -> Option<(usize, usize)> {
    let lo = ((alpha * m as f64).ceil() as usize).max(1);
    let hi = ((1.0 - alpha) * m as f64).floor() as usize;
    (lo <= hi).then_some((lo, hi))
}

/// BEMA: fit σ² by least squares of the trimmed central eigenvalues against
/// MP(1, c) quantiles, then place λ₊ at the edge plus a Tracy–Widom
/// correction. Also evaluates the fit error against τ = `DEFAULT_TAU`.
pub fn bema_fit(esd: &Esd, alpha: f64, beta: f64) -> Result<MPFitResult> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(Error::Parameter(format!("alpha {alpha} outside (0, 1/2)")));
    }
    let m = esd.len();
    if m < 10 {
        return Err(Error::Parameter(format!("spectrum of length {m} is too short to fit")));
    }
    let (lo, hi) = trim_window(m, alpha)
        .ok_or_else(|| Error::Parameter(format!("empty trim window for m={m}, alpha={alpha}")))?;
    let c = esd.c();
    let unit = MPParams::new(1.0, c)?;
    let (mut sq, mut sl) = (0.0, 0.0);
    for k in lo..=hi {
        let q = unit.bulk_quantile(k as f64 / m as f64)?;
        sq += q * q;
        sl += q * esd.eigenvalues[k - 1];
    }
    let sigma2_hat = sl / sq;
    if !(sigma2_hat > 0.0) {
        return Err(Error::Degenerate("trimmed spectrum is zero".into()));
    }
    let t = tw_quantile(beta)?;
    let r = c.sqrt();
    let n = esd.n_rows as f64;
    let lambda_plus_hat =
        sigma2_hat * ((1.0 + r).powi(2) + t * n.powf(-2.0 / 3.0) * (1.0 + r) * (1.0 + 1.0 / r).cbrt());
    let mut fit = MPFitResult {
        sigma2_hat,
        lambda_plus_hat,
        c,
        fit_error: 0.0,
        accepted: false,
        alpha,
        beta,
        tau: DEFAULT_TAU,
    };
    fit.fit_error = fit_error(esd, &fit, alpha)?;
    Ok(fit.with_tau(DEFAULT_TAU))
}

/// Largest gap between the empirical CDF i/m and the fitted law over the
/// trimmed window. The fitted law is the MP bulk with σ̂² and c = M/N.
pub fn fit_error(esd: &Esd, fit: &MPFitResult, alpha: f64) -> Result<f64> {
    let m = esd.len();
    let Some((lo, hi)) = trim_window(m, alpha) else {
        return Ok(1.0);
    };
    let law = fit.params()?;
    let mut s: f64 = 0.0;
    for i in lo..=hi {
        let gap = (i as f64 / m as f64 - law.bulk_cdf(esd.eigenvalues[i - 1])).abs();
        s = s.max(gap);
    }
    Ok(s.min(1.0))
}

/// Fraction of singular values of `W` at or below `√(λ₊·N)`, over
/// min(N, M).
pub fn spike_metric(w: &RealMatrix, lambda_plus_hat: f64) -> Result<f64> {
    let sv = w.singular_values()?;
    Ok(spike_metric_from_sv(&sv, w.rows(), lambda_plus_hat))
}

pub fn spike_metric_from_sv(sv: &[f64], n_rows: usize, lambda_plus_hat: f64) -> f64 {
    if sv.is_empty() {
        return 1.0;
    }
    let thr = (lambda_plus_hat.max(0.0) * n_rows as f64).sqrt();
    sv.iter().filter(|&&s| s <= thr).count() as f64 / sv.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub gamma: f64,
    pub mu: f64,
    pub lambda_plus_hat: f64,
    pub sigma2_hat: f64,
    pub nnz: usize,
    pub accepted: bool,
    /// Spectrum could not be fitted (e.g. zero matrix); γ = μ = 1 by
    /// convention.
    pub degenerate: bool,
}

pub fn layer_metrics(w: &RealMatrix, alpha: f64, beta: f64, tau: f64) -> Result<LayerMetrics> {
    let sv = w.singular_values()?;
    layer_metrics_from_sv(&sv, w.rows(), w.cols(), w.nnz(), alpha, beta, tau)
}

pub fn layer_metrics_from_sv(
    sv: &[f64],
    n_rows: usize,
    n_cols: usize,
    nnz: usize,
    alpha: f64,
    beta: f64,
    tau: f64,
) -> Result<LayerMetrics> {
    let esd = Esd::from_singular_values(sv, n_rows, n_cols);
    match bema_fit(&esd, alpha, beta) {
        Ok(fit) => {
            let fit = fit.with_tau(tau);
            Ok(LayerMetrics {
                gamma: spike_metric_from_sv(sv, n_rows, fit.lambda_plus_hat),
                mu: fit.fit_error,
                lambda_plus_hat: fit.lambda_plus_hat,
                sigma2_hat: fit.sigma2_hat,
                nnz,
                accepted: fit.accepted,
                degenerate: false,
            })
        }
        Err(Error::Degenerate(_)) => Ok(LayerMetrics {
            gamma: 1.0,
            mu: 1.0,
            lambda_plus_hat: 0.0,
            sigma2_hat: 0.0,
            nnz,
            accepted: false,
            degenerate: true,
        }),
        Err(e) => Err(e),
    }
}

/// φ(z) = ∫ z/(z² − t²) dμ(t) over the singular-value law μ = √·(MP bulk).
fn phi(z: f64, p: &MPParams) -> f64 {
    let w = p.width();
    let d = z * z - p.lambda_plus;
    let integrand = |th: f64| {
        let (s, c) = (0.5 * th).sin_cos();
        let c2 = c * c;
        // z² − x = d + w·cos²(θ/2); the density carries a cos²(θ/2) factor
        // that cancels the pole when z sits on the edge.
        let ratio = if d == 0.0 { 1.0 / w } else { c2 / (d + w * c2) };
        let s2_over_x = if p.lambda_minus == 0.0 { 1.0 / w } else { s * s / p.x_of(th) };
        z * w * w * s2_over_x * ratio / (2.0 * PI * p.sigma2 * p.c * p.bulk_mass())
    };
    integrate(&integrand, 0.0, PI, D_TOL)
}

/// D(z) = φ(z)·[c φ(z) + (1 − c)/z] with c = min(c, 1/c), defined for
/// z ≥ √λ₊.
pub fn d_transform(z: f64, p: &MPParams) -> Result<f64> {
    let edge = p.lambda_plus.sqrt();
    if z < edge {
        return Err(Error::Domain(format!("D-transform needs z ≥ √λ₊ = {edge}, got {z}")));
    }
    let f = phi(z, p);
    let cd = p.c.min(1.0 / p.c);
    Ok(f * (cd * f + (1.0 - cd) / z))
}

/// Detection threshold θ̄ = D(√λ₊)^(−1/2).
pub fn theta_bar(p: &MPParams) -> Result<f64> {
    Ok(d_transform(p.lambda_plus.sqrt(), p)?.powf(-0.5))
}

/// Solve D(z) = y on [√λ₊, 10√λ₊] by bisection (D is decreasing there).
pub fn d_inverse(y: f64, p: &MPParams) -> Result<f64> {
    let (mut lo, mut hi) = (p.lambda_plus.sqrt(), 10.0 * p.lambda_plus.sqrt());
    let (d_lo, d_hi) = (d_transform(lo, p)?, d_transform(hi, p)?);
    if !(y <= d_lo && y >= d_hi) {
        return Err(Error::Domain(format!("{y} outside the range [{d_hi}, {d_lo}] of D")));
    }
    while hi - lo > 1e-13 * hi {
        let mid = 0.5 * (lo + hi);
        if d_transform(mid, p)? > y {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pdf_points() {
        let p = MPParams::new(1.0, 1.0).unwrap();
        assert_eq!(p.lambda_plus, 4.0);
        assert_eq!(mp_pdf(5.0, &p), 0.0);
        assert!((mp_pdf(2.0, &p) - 1.0 / (2.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn cdf_edges_and_atom() {
        let p = MPParams::new(2.0, 0.5).unwrap();
        assert_eq!(mp_cdf(p.lambda_minus, &p), 0.0);
        assert_eq!(mp_cdf(p.lambda_plus, &p), 1.0);
        let p = MPParams::new(1.0, 4.0).unwrap();
        assert!((mp_cdf(0.0, &p) - 0.75).abs() < 1e-15);
        assert_eq!(mp_quantile(0.5, &p).unwrap(), 0.0);
        assert!(mp_quantile(1.5, &p).is_err());
    }

    #[test]
    fn tw_knots_and_direction() {
        assert_eq!(tw_quantile(0.5).unwrap(), tw_table::TW1_TABLE[99].1);
        assert!((tw_quantile(0.5).unwrap() + 1.2686).abs() < 1e-3);
        assert!(tw_quantile(0.9).unwrap() < tw_quantile(0.1).unwrap());
        assert!(tw_quantile(0.0).is_err() && tw_quantile(1.0).is_err());
    }

    #[test]
    fn short_spectrum_rejected() {
        let esd = Esd { eigenvalues: vec![1.0; 5], n_rows: 5, n_cols: 5 };
        assert!(matches!(bema_fit(&esd, 0.25, 0.8), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_layer_is_degenerate() {
        let m = layer_metrics(&RealMatrix::zeros(40, 40), 0.25, 0.8, 0.3).unwrap();
        assert!(m.degenerate);
        assert_eq!((m.gamma, m.mu), (1.0, 1.0));
    }
}
