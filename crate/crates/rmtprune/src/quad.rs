//! Adaptive quadrature: the double-exponential rule, bisecting the interval
//! whenever its error estimate misses the tolerance.

const MAX_DEPTH: u32 = 40;

pub fn integrate(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    integrate_rec(f, a, b, tol, 0)
}

fn integrate_rec(f: &impl Fn(f64) -> f64, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    if a == b {
        return 0.0;
    }
    let out = quadrature::double_exponential::integrate(f, a, b, tol);
    if out.error_estimate <= tol || depth >= MAX_DEPTH {
        return out.integral;
    }
    let mid = 0.5 * (a + b);
    integrate_rec(f, a, mid, 0.5 * tol, depth + 1) + integrate_rec(f, mid, b, 0.5 * tol, depth + 1)
}
