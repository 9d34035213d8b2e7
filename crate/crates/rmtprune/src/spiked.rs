//! Planted low-rank-plus-noise matrices `W = R + S` and the limits their
//! top singular values and vectors converge to.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, orthonormal_columns, RealMatrix};
use crate::rmt::{theta_bar, MPParams};
use crate::rng;

const STREAM_NOISE: u64 = 0;
const STREAM_LEFT: u64 = 1;
const STREAM_RIGHT: u64 = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpikedSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Planted singular values, strictly descending.
    pub planted_sigmas: Vec<f64>,
    /// Noise variance factor g: entries of R are N(0, g/N).
    pub noise_scale: f64,
    pub seed: u64,
}

impl SpikedSpec {
    pub fn validate(&self) -> Result<()> {
        let r = self.planted_sigmas.len();
        if self.n_rows == 0 || self.n_cols == 0 {
            return Err(Error::Parameter("spiked matrix needs positive dimensions".into()));
        }
        if r > self.n_rows.min(self.n_cols) {
            return Err(Error::Parameter(format!(
                "{r} spikes exceed min({}, {})",
                self.n_rows, self.n_cols
            )));
        }
        if !(self.noise_scale > 0.0 && self.noise_scale <= 1.0) {
            return Err(Error::Parameter(format!("noise scale {} outside (0, 1]", self.noise_scale)));
        }
        if self.planted_sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
            return Err(Error::Parameter("planted singular values must be finite and nonnegative".into()));
        }
        if self.planted_sigmas.windows(2).any(|w| w[0] - w[1] < 1e-6) {
            return Err(Error::Parameter(
                "planted singular values must be strictly descending and at least 1e-6 apart".into(),
            ));
        }
        Ok(())
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

#[derive(Clone, Debug)]
pub struct DeformedSample {
    pub w: RealMatrix,
    pub r: RealMatrix,
    pub s: RealMatrix,
    /// N × r, orthonormal columns.
    pub u: RealMatrix,
    /// M × r, orthonormal columns.
    pub v: RealMatrix,
    pub sigmas: Vec<f64>,
}

impl DeformedSample {
    /// `γR + S`, the partially denoised matrix.
    pub fn with_noise_fraction(&self, gamma: f64) -> RealMatrix {
        let mut m = self.s.clone();
        m.axpy(gamma, &self.r).expect("R and S share a shape");
        m
    }
}

/// R, U and V come from independent ChaCha streams of `spec.seed`.
pub fn generate_spiked(spec: &SpikedSpec) -> Result<DeformedSample> {
    spec.validate()?;
    let (n, m, r) = (spec.n_rows, spec.n_cols, spec.planted_sigmas.len());
    let std = (spec.noise_scale / n as f64).sqrt();
    let noise = RealMatrix::gaussian(n, m, std, &mut rng::substream(spec.seed, STREAM_NOISE));
    let (u, v) = if r == 0 {
        (RealMatrix::zeros(n, 0), RealMatrix::zeros(m, 0))
    } else {
        let gu = RealMatrix::gaussian(n, r, 1.0, &mut rng::substream(spec.seed, STREAM_LEFT));
        let gv = RealMatrix::gaussian(m, r, 1.0, &mut rng::substream(spec.seed, STREAM_RIGHT));
        (orthonormal_columns(&gu), orthonormal_columns(&gv))
    };
    let us = RealMatrix::from_fn(n, r, |i, k| u.get(i, k) * spec.planted_sigmas[k]);
    let s = if r == 0 { RealMatrix::zeros(n, m) } else { us.matmul(&v.transpose())? };
    let w = noise.add(&s)?;
    Ok(DeformedSample { w, r: noise, s, u, v, sigmas: spec.planted_sigmas.clone() })
}

/// Almost-sure limit of a planted singular value σ under noise variance
/// g/N: √g·h(σ/√g) with h(x) = (1 + x²)/x above 1 and 2 otherwise.
pub fn predict_singular_value(sigma: f64, g: f64) -> f64 {
    let x = sigma / g.sqrt();
    g.sqrt() * if x > 1.0 { (1.0 + x * x) / x } else { 2.0 }
}

/// Limit of |⟨uᵢ, u′ᵢ⟩|² (and of the right vectors) for square Gaussian
/// noise with unit variance factor.
pub fn predict_overlap(sigma: f64) -> f64 {
    if sigma > 1.0 {
        1.0 - 1.0 / (sigma * sigma)
    } else {
        0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeMeasurement {
    pub sigma_prime: Vec<f64>,
    pub overlap_left: Vec<f64>,
    pub overlap_right: Vec<f64>,
    /// max over i ≠ j of |⟨uᵢ, u′ⱼ⟩|² and |⟨vᵢ, v′ⱼ⟩|².
    pub max_cross_overlap: f64,
}

/// Pair the top r singular triplets of W with the planted spikes in
/// descending order.
pub fn measure_spikes(sample: &DeformedSample) -> Result<SpikeMeasurement> {
    let r = sample.sigmas.len();
    if r == 0 {
        return Err(Error::Parameter("sample has no planted spikes".into()));
    }
    let svd = sample.w.thin_svd()?;
    let col = |m: &RealMatrix, j: usize| m.column(j);
    let mut m = SpikeMeasurement {
        sigma_prime: svd.s[..r].to_vec(),
        overlap_left: Vec::with_capacity(r),
        overlap_right: Vec::with_capacity(r),
        max_cross_overlap: 0.0,
    };
    let planted_u: Vec<Vec<f64>> = (0..r).map(|i| col(&sample.u, i)).collect();
    let planted_v: Vec<Vec<f64>> = (0..r).map(|i| col(&sample.v, i)).collect();
    let found_u: Vec<Vec<f64>> = (0..r).map(|i| col(&svd.u, i)).collect();
    let found_v: Vec<Vec<f64>> = (0..r).map(|i| col(&svd.v, i)).collect();
    for i in 0..r {
        for j in 0..r {
            let ou = dot(&planted_u[i], &found_u[j]).powi(2);
            let ov = dot(&planted_v[i], &found_v[j]).powi(2);
            if i == j {
                m.overlap_left.push(ou);
                m.overlap_right.push(ov);
            } else {
                m.max_cross_overlap = m.max_cross_overlap.max(ou).max(ov);
            }
        }
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpikeRow {
    pub seed: u64,
    pub i: usize,
    pub sigma: f64,
    pub sigma_prime_pred: f64,
    pub sigma_prime_emp: f64,
    pub overlap_pred: f64,
    pub overlap_left_emp: f64,
    pub overlap_right_emp: f64,
}

/// One row per (seed, planted spike).
pub fn spike_report(spec: &SpikedSpec, seeds: &[u64]) -> Result<Vec<SpikeRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let sample = generate_spiked(&spec.with_seed(seed))?;
        let m = measure_spikes(&sample)?;
        for (i, &sigma) in spec.planted_sigmas.iter().enumerate() {
            rows.push(SpikeRow {
                seed,
                i,
                sigma,
                sigma_prime_pred: predict_singular_value(sigma, spec.noise_scale),
                sigma_prime_emp: m.sigma_prime[i],
                overlap_pred: predict_overlap(sigma / spec.noise_scale.sqrt()),
                overlap_left_emp: m.overlap_left[i],
                overlap_right_emp: m.overlap_right[i],
            });
        }
    }
    Ok(rows)
}

/// Spike-size thresholds in singular-value units of W: half the noise
/// edge (the planted-spike assumption) and the D-transform detection
/// threshold θ̄. Reported side by side, not reconciled.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Thresholds {
    pub noise_edge: f64,
    pub half_edge: f64,
    pub theta_bar: f64,
}

pub fn thresholds(spec: &SpikedSpec) -> Result<Thresholds> {
    let c = spec.n_cols as f64 / spec.n_rows as f64;
    let law = MPParams::new(1.0, c)?;
    let scale = spec.noise_scale.sqrt();
    let edge = scale * law.lambda_plus.sqrt();
    Ok(Thresholds { noise_edge: edge, half_edge: edge / 2.0, theta_bar: scale * theta_bar(&law)? })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormScalingRow {
    pub n: usize,
    /// ‖R‖_F² / (N g), → 1.
    pub frobenius_ratio: f64,
    /// ‖R‖₂² / (4 g), → 1.
    pub spectral_ratio: f64,
}

/// Norms of square N × N noise with entries N(0, g/N).
pub fn norm_scaling_check(ns: &[usize], g: f64, seed: u64) -> Result<Vec<NormScalingRow>> {
    ns.iter()
        .map(|&n| {
            let spec = SpikedSpec { n_rows: n, n_cols: n, planted_sigmas: vec![], noise_scale: g, seed };
            let s = generate_spiked(&spec)?;
            let spec_norm = s.r.spectral_norm()?;
            Ok(NormScalingRow {
                n,
                frobenius_ratio: s.r.frobenius_sq() / (n as f64 * g),
                spectral_ratio: spec_norm * spec_norm / (4.0 * g),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predictions() {
        assert_eq!(predict_singular_value(2.0, 1.0), 2.5);
        assert_eq!(predict_singular_value(0.5, 1.0), 2.0);
        assert!((predict_singular_value(1.0, 0.25) - 1.25).abs() < 1e-15);
        assert_eq!(predict_overlap(2.0), 0.75);
        assert_eq!(predict_overlap(1.0), 0.0);
        assert!((predict_overlap(3.0) - 8.0 / 9.0).abs() < 1e-15);
    }

    #[test]
    fn spec_validation() {
        let base = SpikedSpec { n_rows: 10, n_cols: 10, planted_sigmas: vec![2.0, 1.0], noise_scale: 1.0, seed: 0 };
        assert!(base.validate().is_ok());
        let too_many = SpikedSpec { planted_sigmas: vec![1.0; 11], ..base.clone() };
        assert!(too_many.validate().is_err());
        let tie = SpikedSpec { planted_sigmas: vec![2.0, 2.0 - 1e-9], ..base.clone() };
        assert!(tie.validate().is_err());
        assert!(generate_spiked(&SpikedSpec { noise_scale: 0.0, ..base }).is_err());
    }
}
