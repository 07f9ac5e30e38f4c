//! Slow reference implementations used only by tests. Nothing here calls
//! into the library's numeric paths.
#![allow(dead_code)]

use std::f64::consts::PI;

#[derive(Debug, Clone, Copy)]
pub struct QuadratureSpec {
    pub a: f64,
    pub b: f64,
    pub max_depth: u32,
    pub tolerance: f64,
}

impl QuadratureSpec {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b, max_depth: 50, tolerance: 1e-10 }
    }
}

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, spec: QuadratureSpec) -> f64 {
    assert!(spec.tolerance > 0.0);
    let (a, b) = (spec.a, spec.b);
    let (fa, fb, fm) = (f(a), f(b), f((a + b) / 2.0));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    simpson(f, a, b, fa, fm, fb, whole, spec.tolerance, spec.max_depth)
}

#[allow(clippy::too_many_arguments)]
fn simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = (a + b) / 2.0;
    let (lm, rm) = ((a + m) / 2.0, (m + b) / 2.0);
    let (flm, frm) = (f(lm), f(rm));
    let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
    let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
    let delta = left + right - whole;
    if depth == 0 || delta.abs() <= 15.0 * tol {
        return left + right + delta / 15.0;
    }
    simpson(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + simpson(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
}

/// Integral split into `pieces` equal panels, each integrated adaptively.
pub fn integrate_pieces(f: &dyn Fn(f64) -> f64, a: f64, b: f64, pieces: usize, tolerance: f64) -> f64 {
    let w = (b - a) / pieces as f64;
    (0..pieces)
        .map(|i| {
            let lo = a + w * i as f64;
            integrate(f, QuadratureSpec { a: lo, b: lo + w, max_depth: 40, tolerance: tolerance / pieces as f64 })
        })
        .sum()
}

/// Central finite-difference gradient.
pub fn fd_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut p = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = p[i];
            p[i] = orig + h;
            let up = f(&p);
            p[i] = orig - h;
            let down = f(&p);
            p[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn gaussian_pdf(x: f64, mu: f64, sigma: f64) -> f64 {
    let z = (x - mu) / sigma;
    (-0.5 * z * z).exp() / (sigma * (2.0 * PI).sqrt())
}

pub fn student_t_pdf(x: f64, mu: f64, sigma: f64, nu: f64) -> f64 {
    let z = (x - mu) / sigma;
    let log_norm = libm::lgamma((nu + 1.0) / 2.0) - libm::lgamma(nu / 2.0) - 0.5 * (nu * PI).ln() - sigma.ln();
    (log_norm - (nu + 1.0) / 2.0 * (z * z / nu).ln_1p()).exp()
}

/// Gaussian CDF from the complementary error function in `libm`.
pub fn gaussian_cdf(x: f64, mu: f64, sigma: f64) -> f64 {
    0.5 * libm::erfc(-(x - mu) / (sigma * std::f64::consts::SQRT_2))
}

/// CDF of a density by quadrature from `mu - span` (treated as zero mass).
pub fn cdf_by_quadrature(pdf: &dyn Fn(f64) -> f64, mu: f64, sigma: f64, x: f64, span: f64) -> f64 {
    let lo = mu - span * sigma;
    if x <= lo {
        return 0.0;
    }
    integrate_pieces(pdf, lo, x, 64, 1e-12)
}

/// ∫ (F(t) − 1{t ≥ y})² dt over `mu ± 60 sigma`, split at `y`.
pub fn crps_quadrature(cdf: &dyn Fn(f64) -> f64, mu: f64, sigma: f64, y: f64) -> f64 {
    let (lo, hi) = (mu - 60.0 * sigma, mu + 60.0 * sigma);
    let below = |t: f64| cdf(t).powi(2);
    let above = |t: f64| (1.0 - cdf(t)).powi(2);
    let y_c = y.clamp(lo, hi);
    let mut total = 0.0;
    if y_c > lo {
        total += integrate_pieces(&below, lo, y_c, 200, 1e-11);
    }
    if hi > y_c {
        total += integrate_pieces(&above, y_c, hi, 200, 1e-11);
    }
    // Outcome outside the window: the indicator is constant over the range.
    if y < lo {
        total += lo - y;
    } else if y > hi {
        total += y - hi;
    }
    total
}

/// Clamped uniform knots of length `r + k + 1`.
pub fn clamped_knots(k: usize, r: usize, lo: f64, hi: f64) -> Vec<f64> {
    let interior = r - k;
    let mut t = vec![lo; k + 1];
    for i in 1..interior {
        t.push(lo + (hi - lo) * i as f64 / interior as f64);
    }
    t.extend(std::iter::repeat_n(hi, k + 1));
    t
}

/// Direct recursive Cox-de Boor evaluation of `B_{i,k}(x)`.
pub fn cox_de_boor(knots: &[f64], i: usize, k: usize, x: f64) -> f64 {
    if k == 0 {
        let last = *knots.last().unwrap();
        let (a, b) = (knots[i], knots[i + 1]);
        // Right end belongs to the last non-empty interval.
        if x == last {
            return if b == last && a < b { 1.0 } else { 0.0 };
        }
        return if a <= x && x < b { 1.0 } else { 0.0 };
    }
    let mut v = 0.0;
    let d1 = knots[i + k] - knots[i];
    if d1 > 0.0 {
        v += (x - knots[i]) / d1 * cox_de_boor(knots, i, k - 1, x);
    }
    let d2 = knots[i + k + 1] - knots[i + 1];
    if d2 > 0.0 {
        v += (knots[i + k + 1] - x) / d2 * cox_de_boor(knots, i + 1, k - 1, x);
    }
    v
}

pub fn cox_de_boor_all(knots: &[f64], k: usize, r: usize, x: f64) -> Vec<f64> {
    (0..r).map(|i| cox_de_boor(knots, i, k, x)).collect()
}

/// Indices of points not dominated by any other: `(savings, risk)`, higher
/// savings and lower risk are better.
pub fn brute_force_frontier(points: &[(f64, f64)]) -> Vec<usize> {
    (0..points.len())
        .filter(|&i| {
            !(0..points.len()).any(|j| {
                let (si, ri) = points[i];
                let (sj, rj) = points[j];
                j != i && sj >= si && rj <= ri && (sj > si || rj < ri)
            })
        })
        .collect()
}

pub fn rel_close(a: f64, b: f64, rel: f64, abs: f64) -> bool {
    (a - b).abs() <= abs.max(rel * a.abs().max(b.abs()))
}

/// Calibrated forecaster: draws `n` Gaussian outcomes around a seasonal
/// mean and returns each outcome with its true generating distribution.
pub fn oracle_gaussian_steps(n: usize, seed: u64) -> Vec<(f64, f64, f64)> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    (0..n)
        .map(|t| {
            let mu = 60.0 + 20.0 * (std::f64::consts::TAU * t as f64 / 24.0).sin();
            let sigma = 4.0 + 2.0 * (t % 7) as f64 / 6.0;
            (mu, sigma, mu + sigma * std_normal.sample(&mut rng))
        })
        .collect()
}
