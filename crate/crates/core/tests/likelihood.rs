mod support;

use std::f64::consts::FRAC_PI_2;

use pkan_core::autodiff::{Tape, Tensor};
use pkan_core::likelihood::{log_pdf_var, Family, PredictiveDistribution};
use proptest::prelude::*;
use support::*;

const NUS: [f64; 4] = [2.1, 3.0, 10.0, 100.0];

/// Mass of a density over the whole line via `t = mu + sigma tan(θ)`.
fn total_mass(d: &PredictiveDistribution) -> f64 {
    let (mu, sigma) = (d.mu(), d.sigma());
    let f = |th: f64| {
        let c = th.cos();
        if c <= 0.0 {
            return 0.0;
        }
        d.pdf(mu + sigma * th.tan()) * sigma / (c * c)
    };
    integrate_pieces(&f, -FRAC_PI_2, FRAC_PI_2, 400, 1e-12)
}

fn dists() -> Vec<PredictiveDistribution> {
    let mut v = vec![PredictiveDistribution::gaussian(1.5, 0.7).unwrap()];
    v.extend(NUS.iter().map(|&nu| PredictiveDistribution::student_t(-2.0, 1.3, nu).unwrap()));
    v
}

#[test]
fn densities_integrate_to_one() {
    for d in dists() {
        let m = total_mass(&d);
        assert!((m - 1.0).abs() < 1e-6, "{d:?}: {m}");
    }
}

#[test]
fn window_mass_matches_cdf_difference() {
    // Heavy tails leave mass outside mu ± 60 sigma; the quadrature must
    // agree with the CDF over the same window.
    for d in dists() {
        let (lo, hi) = (d.mu() - 60.0 * d.sigma(), d.mu() + 60.0 * d.sigma());
        let q = integrate_pieces(&|t| d.pdf(t), lo, hi, 400, 1e-12);
        assert!((q - (d.cdf(hi) - d.cdf(lo))).abs() < 1e-7, "{d:?}");
    }
}

#[test]
fn densities_agree_with_independent_formulas() {
    for i in 0..50 {
        let y = -8.0 + 0.33 * i as f64;
        let g = PredictiveDistribution::gaussian(0.4, 1.7).unwrap();
        assert!(rel_close(g.pdf(y), gaussian_pdf(y, 0.4, 1.7), 1e-12, 1e-300));
        assert!((g.cdf(y) - gaussian_cdf(y, 0.4, 1.7)).abs() < 1e-14);
        for nu in NUS {
            let t = PredictiveDistribution::student_t(0.4, 1.7, nu).unwrap();
            assert!(rel_close(t.pdf(y), student_t_pdf(y, 0.4, 1.7, nu), 1e-11, 1e-300));
        }
    }
}

#[test]
fn student_t_cdf_matches_quadrature() {
    for nu in NUS {
        let mu = 0.5;
        let sigma = 2.0;
        let d = PredictiveDistribution::student_t(mu, sigma, nu).unwrap();
        for y in [-4.0, -1.0, 0.5, 2.0, 7.0] {
            // Lower tail below the window from the symmetric upper CDF.
            let span = 60.0;
            let tail = 1.0 - d.cdf(mu + span * sigma);
            let q = tail + cdf_by_quadrature(&|t| student_t_pdf(t, mu, sigma, nu), mu, sigma, y, span);
            assert!((q - d.cdf(y)).abs() < 1e-9, "nu={nu} y={y}: {q} vs {}", d.cdf(y));
        }
    }
}

#[test]
fn quantile_cdf_round_trip() {
    for d in dists() {
        for i in 1..=99 {
            let p = i as f64 / 100.0;
            let q = d.quantile(p).unwrap();
            assert!((d.cdf(q) - p).abs() < 1e-8, "{d:?} p={p}");
        }
    }
}

#[test]
fn quantiles_reject_invalid_levels() {
    let d = PredictiveDistribution::gaussian(0.0, 1.0).unwrap();
    for p in [0.0, 1.0, -0.1, f64::NAN] {
        assert!(d.quantile(p).is_err());
    }
    assert!(PredictiveDistribution::student_t(0.0, 1.0, 2.0).is_err());
    assert!(PredictiveDistribution::gaussian(0.0, 0.0).is_err());
}

#[test]
fn student_t_converges_to_gaussian() {
    let g = PredictiveDistribution::gaussian(1.0, 2.0).unwrap();
    let t = PredictiveDistribution::student_t(1.0, 2.0, 1e6).unwrap();
    for i in 0..=80 {
        let y = -9.0 + 0.25 * i as f64;
        assert!((g.log_pdf(y) - t.log_pdf(y)).abs() < 1e-3);
    }
}

#[test]
fn gaussian_crps_matches_quadrature() {
    let d = PredictiveDistribution::gaussian(0.0, 1.0).unwrap();
    let q = crps_quadrature(&|t| gaussian_cdf(t, 0.0, 1.0), 0.0, 1.0, 0.0);
    assert!((q - 0.23370).abs() < 1e-4);
    assert!((d.crps(0.0) - q).abs() < 1e-6);

    let sharp = PredictiveDistribution::gaussian(3.0, 1e-6).unwrap();
    assert!((sharp.crps(4.0) - 1.0).abs() < 1e-5);

    let mut state = 0x2545_f491_4f6c_dd1d_u64;
    let mut uniform = || {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    for _ in 0..50 {
        let mu = -5.0 + 10.0 * uniform();
        let sigma = 0.2 + 3.0 * uniform();
        let y = mu + sigma * (-4.0 + 8.0 * uniform());
        let d = PredictiveDistribution::gaussian(mu, sigma).unwrap();
        let q = crps_quadrature(&|t| gaussian_cdf(t, mu, sigma), mu, sigma, y);
        assert!((d.crps(y) - q).abs() < 1e-6, "mu={mu} sigma={sigma} y={y}");
    }
}

#[test]
fn student_t_crps_grid_tracks_exact_score() {
    for (y, nu) in [(0.0, 1e6), (1.3, 1e6), (-2.0, 1e6)] {
        let g = PredictiveDistribution::gaussian(0.0, 1.0).unwrap();
        let t = PredictiveDistribution::student_t(0.0, 1.0, nu).unwrap();
        assert!(rel_close(t.crps(y), g.crps(y), 0.01, 0.0), "y={y}");
    }
    for nu in [3.0, 10.0] {
        let t = PredictiveDistribution::student_t(0.0, 1.0, nu).unwrap();
        for y in [0.0, 0.8, -2.5] {
            let q = crps_quadrature(&|x| t.cdf(x), 0.0, 1.0, y);
            assert!(rel_close(t.crps(y), q, 0.01, 0.0), "nu={nu} y={y}: {} vs {q}", t.crps(y));
        }
    }
}

#[test]
fn crps_is_minimised_at_the_median() {
    for d in dists() {
        let at_median = d.crps(d.median());
        for i in 1..=40 {
            let off = 0.05 * i as f64 * d.sigma();
            assert!(d.crps(d.median() + off) >= at_median);
            assert!(d.crps(d.median() - off) >= at_median);
        }
    }
}

proptest! {
    #[test]
    fn crps_is_nonnegative(mu in -10.0f64..10.0, sigma in 0.01f64..10.0, nu in 2.05f64..50.0, y in -50.0f64..50.0) {
        prop_assert!(PredictiveDistribution::gaussian(mu, sigma).unwrap().crps(y) >= 0.0);
        prop_assert!(PredictiveDistribution::student_t(mu, sigma, nu).unwrap().crps(y) >= 0.0);
    }

    #[test]
    fn quantiles_are_monotone(mu in -5.0f64..5.0, sigma in 0.1f64..5.0, nu in 2.05f64..100.0, a in 0.001f64..0.999, b in 0.001f64..0.999) {
        prop_assume!(a < b);
        for d in [PredictiveDistribution::gaussian(mu, sigma).unwrap(), PredictiveDistribution::student_t(mu, sigma, nu).unwrap()] {
            prop_assert!(d.quantile(a).unwrap() <= d.quantile(b).unwrap());
        }
    }

    #[test]
    fn log_pdf_gradients_match_finite_differences(mu in -3.0f64..3.0, sigma in 0.3f64..3.0, nu in 2.2f64..30.0, y in -6.0f64..6.0) {
        for family in [Family::Gaussian, Family::StudentT] {
            let value = |p: &[f64]| match family {
                Family::Gaussian => PredictiveDistribution::gaussian(p[0], p[1]).unwrap().log_pdf(y),
                Family::StudentT => PredictiveDistribution::student_t(p[0], p[1], p[2]).unwrap().log_pdf(y),
            };
            let tape = Tape::new();
            let (m, s, n) = (tape.scalar(mu), tape.scalar(sigma), tape.scalar(nu));
            let yv = tape.leaf(Tensor::scalar(y));
            let nu_var = (family == Family::StudentT).then_some(n);
            let out = log_pdf_var(family, m, s, nu_var, yv).unwrap();
            prop_assert!((out.value().data()[0] - value(&[mu, sigma, nu])).abs() < 1e-10);
            tape.backward(out).unwrap();
            let fd = fd_gradient(&mut |p| value(p), &[mu, sigma, nu], 1e-6);
            let g = [m.grad().data()[0], s.grad().data()[0], n.grad().data()[0]];
            let used = if family == Family::Gaussian { 2 } else { 3 };
            for i in 0..used {
                prop_assert!(rel_close(g[i], fd[i], 1e-5, 1e-8), "{family:?} {i}: {} vs {}", g[i], fd[i]);
            }
        }
    }
}
