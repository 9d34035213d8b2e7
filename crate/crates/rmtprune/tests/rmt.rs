use std::f64::consts::PI;

use proptest::prelude::*;
use rmtprune::linalg::{orthonormal_columns, RealMatrix};
use rmtprune::rmt::{self, Esd, MPFitResult, MPParams};
use rmtprune::rng;

fn square_law() -> MPParams {
    MPParams::new(1.0, 1.0).unwrap()
}

/// CDF of MP(1, 1) in closed form: with x = 4 sin²φ the density becomes
/// (4/π) cos²φ dφ, so F = (2/π)(φ + sin φ cos φ).
fn square_cdf_oracle(x: f64) -> f64 {
    let phi = (x / 4.0).sqrt().asin();
    2.0 / PI * (phi + phi.sin() * phi.cos())
}

fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[test]
fn density_points() {
    let p = square_law();
    assert_eq!(p.lambda_plus, 4.0);
    assert_eq!(rmt::mp_pdf(5.0, &p), 0.0);
    assert!((rmt::mp_pdf(2.0, &p) - 1.0 / (2.0 * PI)).abs() < 1e-12);
}

#[test]
fn median_matches_closed_form() {
    let p = square_law();
    let oracle = bisect(|x| square_cdf_oracle(x) - 0.5, 0.0, 4.0);
    let q = rmt::mp_quantile(0.5, &p).unwrap();
    assert!((q - oracle).abs() < 1e-6, "{q} vs {oracle}");
    assert!((rmt::mp_cdf(q, &p) - 0.5).abs() < 1e-6);
    for x in [0.1, 0.7, 1.5, 3.2] {
        assert!((rmt::mp_cdf(x, &p) - square_cdf_oracle(x)).abs() < 1e-6);
    }
}

#[test]
fn esd_of_scaled_identity_and_zero() {
    let esd = rmt::compute_esd(&RealMatrix::identity(10).scale(2.0)).unwrap();
    assert!(esd.eigenvalues.iter().all(|&e| (e - 0.4).abs() < 1e-12));
    let z = rmt::compute_esd(&RealMatrix::zeros(10, 10)).unwrap();
    assert!(z.eigenvalues.iter().all(|&e| e == 0.0));
}

#[test]
fn gaussian_edge_near_four() {
    let w = RealMatrix::gaussian(1000, 1000, 1.0, &mut rng::seeded(11));
    let top = *rmt::compute_esd(&w).unwrap().eigenvalues.last().unwrap();
    assert!((top / 4.0 - 1.0).abs() < 0.05, "{top}");
}

#[test]
fn tracy_widom_median() {
    assert!((rmt::tw_quantile(0.5).unwrap() + 1.27).abs() < 0.01);
    assert!(rmt::tw_quantile(0.9).unwrap() < rmt::tw_quantile(0.1).unwrap());
}

#[test]
fn bema_on_large_noise_and_scaling() {
    let w = RealMatrix::gaussian(2000, 2000, 1.0, &mut rng::seeded(12));
    let esd = rmt::compute_esd(&w).unwrap();
    let fit = rmt::bema_fit(&esd, 0.25, 0.5).unwrap();
    assert!((0.97..=1.03).contains(&fit.sigma2_hat), "{}", fit.sigma2_hat);
    assert!((3.85..=4.15).contains(&fit.lambda_plus_hat), "{}", fit.lambda_plus_hat);
    let f9 = rmt::bema_fit(&esd.scaled(9.0), 0.25, 0.5).unwrap();
    assert!((f9.sigma2_hat / fit.sigma2_hat - 9.0).abs() < 1e-9);
    assert!((f9.lambda_plus_hat / fit.lambda_plus_hat - 9.0).abs() < 1e-9);

    // Five spikes at 3√N barely move the trimmed estimate.
    let n = 2000;
    let mut r = rng::seeded(13);
    let u = orthonormal_columns(&RealMatrix::gaussian(n, 5, 1.0, &mut r));
    let v = orthonormal_columns(&RealMatrix::gaussian(n, 5, 1.0, &mut r));
    let s = u.matmul(&v.transpose()).unwrap().scale(3.0 * (n as f64).sqrt());
    let spiked = rmt::bema_fit(&rmt::compute_esd(&w.add(&s).unwrap()).unwrap(), 0.25, 0.5).unwrap();
    assert!((0.97..=1.03).contains(&spiked.sigma2_hat), "{}", spiked.sigma2_hat);
}

fn fit_of(p: &MPParams) -> MPFitResult {
    MPFitResult {
        sigma2_hat: p.sigma2,
        lambda_plus_hat: p.lambda_plus,
        c: p.c,
        fit_error: 0.0,
        accepted: true,
        alpha: 0.25,
        beta: 0.8,
        tau: 0.3,
    }
}

#[test]
fn fit_error_extremes() {
    let p = square_law();
    let m = 500;
    let exact: Vec<f64> = (0..m).map(|i| rmt::mp_quantile((i as f64 + 0.5) / m as f64, &p).unwrap()).collect();
    let esd = Esd { eigenvalues: exact, n_rows: m, n_cols: m };
    assert!(rmt::fit_error(&esd, &fit_of(&p), 0.25).unwrap() < 0.01);
    // W = I: every eigenvalue of WᵀW/N is 1/N, so the largest gap in the
    // trimmed window sits at its upper end.
    let flat = rmt::compute_esd(&RealMatrix::identity(m)).unwrap();
    let s = rmt::fit_error(&flat, &fit_of(&p), 0.25).unwrap();
    let oracle = 0.75 - square_cdf_oracle(1.0 / m as f64);
    assert!(s > 0.4 && (s - oracle).abs() < 1e-6, "{s} vs {oracle}");
}

#[test]
fn layer_metrics_pure_spiked_and_rank_one() {
    let n = 1000;
    let w = RealMatrix::gaussian(n, n, 1.0, &mut rng::seeded(14));
    // β = 0.1 puts λ₊ above the typical largest noise eigenvalue.
    let m = rmt::layer_metrics(&w, 0.25, 0.1, 0.3).unwrap();
    assert!(m.mu < 0.05 && m.gamma == 1.0 && !m.degenerate, "{m:?}");

    let mut r = rng::seeded(15);
    let u = orthonormal_columns(&RealMatrix::gaussian(n, 10, 1.0, &mut r));
    let v = orthonormal_columns(&RealMatrix::gaussian(n, 10, 1.0, &mut r));
    let s = u.matmul(&v.transpose()).unwrap().scale(5.0 * (n as f64).sqrt());
    let m = rmt::layer_metrics(&w.add(&s).unwrap(), 0.25, 0.1, 0.3).unwrap();
    assert!((m.gamma - 0.99).abs() < 1e-9, "{}", m.gamma);

    let big = RealMatrix::from_fn(n, n, |i, j| u.get(i, 0) * v.get(j, 0) * 1e3 * (n as f64).sqrt());
    let m = rmt::layer_metrics(&big.add(&w.scale(1e-3)).unwrap(), 0.25, 0.1, 0.3).unwrap();
    assert!((m.gamma - (1.0 - 1.0 / n as f64)).abs() < 1e-9, "{}", m.gamma);
    // The trimmed window only sees the scaled noise bulk, which is MP.
    assert!(m.mu < 0.05, "{}", m.mu);
}

#[test]
fn d_transform_examples() {
    let p = square_law();
    assert!((rmt::theta_bar(&p).unwrap() - 1.0).abs() < 1e-6);
    assert!((rmt::d_inverse(0.25, &p).unwrap() - 2.5).abs() < 1e-6);
    assert!(rmt::d_transform(2.5, &p).unwrap() < rmt::d_transform(2.1, &p).unwrap());
    // At σ = 2 the closed form gives D(2.5) = 1/4.
    assert!((rmt::d_transform(2.5, &p).unwrap() - 0.25).abs() < 1e-6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cdf_is_monotone(c in 0.1f64..3.0, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let p = MPParams::new(1.0, c).unwrap();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(rmt::mp_cdf(lo, &p) <= rmt::mp_cdf(hi, &p) + 1e-12);
    }

    #[test]
    fn quantile_inverts_cdf(c in 0.1f64..1.0, q in 0.01f64..0.99, s2 in 0.1f64..5.0) {
        let p = MPParams::new(s2, c).unwrap();
        let x = rmt::mp_quantile(q, &p).unwrap();
        prop_assert!(x >= p.lambda_minus - 1e-12 && x <= p.lambda_plus + 1e-12);
        prop_assert!((rmt::mp_cdf(x, &p) - q).abs() < 1e-6);
    }

    #[test]
    fn d_inverse_roundtrip(sigma in 1.05f64..6.0) {
        let p = square_law();
        let y = 1.0 / (sigma * sigma);
        let z = rmt::d_inverse(y, &p).unwrap();
        prop_assert!((z - (1.0 + sigma * sigma) / sigma).abs() < 1e-6);
        prop_assert!((rmt::d_transform(z, &p).unwrap() - y).abs() < 1e-9);
    }
}
