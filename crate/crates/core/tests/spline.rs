mod support;

use pkan_core::autodiff::Tape;
use pkan_core::spline::{phi, ConnectionParams, SplineSpec};
use proptest::prelude::*;
use support::{clamped_knots, cox_de_boor_all, fd_gradient, rel_close};

#[test]
fn knots_are_clamped_uniform() {
    for k in 0..=3 {
        let spec = SplineSpec::new(k, 8, -3.0, 3.0).unwrap();
        let expect = clamped_knots(k, 8, -3.0, 3.0);
        assert_eq!(spec.knots().len(), expect.len());
        for (a, b) in spec.knots().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }
}

#[test]
fn invalid_specs_rejected() {
    assert!(SplineSpec::new(3, 3, -3.0, 3.0).is_err());
    assert!(SplineSpec::new(3, 8, 3.0, -3.0).is_err());
    assert!(SplineSpec::new(3, 8, 1.0, 1.0).is_err());
}

#[test]
fn partition_of_unity_and_local_support() {
    for k in 1..=3 {
        let spec = SplineSpec::new(k, 8, -3.0, 3.0).unwrap();
        for i in 1..=1000 {
            let x = -3.0 + 6.0 * i as f64 / 1001.0;
            let b = spec.basis_eval(x);
            assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(b.iter().filter(|v| **v != 0.0).count() <= k + 1);
        }
    }
}

#[test]
fn degree_zero_is_an_indicator() {
    let spec = SplineSpec::new(0, 6, 0.0, 6.0).unwrap();
    assert_eq!(spec.basis_eval(2.5), vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn matches_recursive_cox_de_boor() {
    for k in 0..=4 {
        for r in [k + 1, 8, 11] {
            let spec = SplineSpec::new(k, r, -2.0, 3.0).unwrap();
            let knots = clamped_knots(k, r, -2.0, 3.0);
            for i in 0..=500 {
                let x = -2.0 + 5.0 * i as f64 / 500.0;
                let ours = spec.basis_eval(x);
                let slow = cox_de_boor_all(&knots, k, r, x);
                for (a, b) in ours.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-12, "k={k} r={r} x={x}: {a} vs {b}");
                }
            }
        }
    }
}

#[test]
fn inputs_outside_grid_are_clamped() {
    let spec = SplineSpec::new(3, 8, -3.0, 3.0).unwrap();
    assert_eq!(spec.basis_eval(-10.0), spec.basis_eval(-3.0));
    assert_eq!(spec.basis_eval(7.0), spec.basis_eval(3.0));
}

fn phi_value(spec: &SplineSpec, p: &ConnectionParams, x: f64) -> f64 {
    p.eval(spec, x)
}

#[test]
fn derivative_is_continuous_across_interior_knots() {
    let spec = SplineSpec::new(3, 8, -3.0, 3.0).unwrap();
    let c: Vec<f64> = (0..8).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.4).collect();
    let p = ConnectionParams::new(&spec, 0.8, 1.3, c).unwrap();
    let h = 1e-6;
    for &t in &spec.knots()[4..8] {
        let left = (phi_value(&spec, &p, t) - phi_value(&spec, &p, t - 2.0 * h)) / (2.0 * h);
        let right = (phi_value(&spec, &p, t + 2.0 * h) - phi_value(&spec, &p, t)) / (2.0 * h);
        assert!((left - right).abs() < 1e-4, "knot {t}: {left} vs {right}");
        assert!((phi_value(&spec, &p, t - h) - phi_value(&spec, &p, t + h)).abs() < 1e-5);
    }
}

proptest! {
    #[test]
    fn phi_gradients_match_finite_differences(
        w in -2.0f64..2.0,
        s in -2.0f64..2.0,
        c in prop::collection::vec(-1.0f64..1.0, 8),
        x in -2.9f64..2.9,
    ) {
        let spec = SplineSpec::new(3, 8, -3.0, 3.0).unwrap();
        let mut theta = vec![w, s, x];
        theta.extend(&c);
        let eval = |t: &[f64]| {
            let p = ConnectionParams::new(&spec, t[0], t[1], t[3..].to_vec()).unwrap();
            p.eval(&spec, t[2])
        };
        let tape = Tape::new();
        let p = ConnectionParams::new(&spec, w, s, c.clone()).unwrap();
        let vars = p.bind(&tape);
        let xv = tape.scalar(x);
        let y = phi(&spec, vars, xv).unwrap();
        prop_assert!((y.value().data()[0] - eval(&theta)).abs() < 1e-12);
        tape.backward(y).unwrap();
        let mut g = vec![vars.w.grad().data()[0], vars.s.grad().data()[0], xv.grad().data()[0]];
        g.extend(vars.c.grad().into_data());
        let fd = fd_gradient(&mut |t| eval(t), &theta, 1e-6);
        for (a, b) in g.iter().zip(&fd) {
            prop_assert!(rel_close(*a, *b, 1e-5, 1e-8), "{a} vs {b}");
        }
    }

    #[test]
    fn basis_is_nonnegative_and_sums_to_one(k in 1usize..=3, r in 4usize..12, x in -3.0f64..3.0) {
        prop_assume!(r > k);
        let spec = SplineSpec::new(k, r, -3.0, 3.0).unwrap();
        let b = spec.basis_eval(x);
        prop_assert_eq!(b.len(), r);
        prop_assert!(b.iter().all(|v| *v >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
