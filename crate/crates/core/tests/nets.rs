use pkan_core::data::Standardizer;
use pkan_core::nets::*;
use proptest::prelude::*;

const FAMILIES: [(ModelFamily, LikelihoodKind); 6] = [
    (ModelFamily::PKan, LikelihoodKind::Gaussian),
    (ModelFamily::PKan, LikelihoodKind::StudentT),
    (ModelFamily::PMlp, LikelihoodKind::Gaussian),
    (ModelFamily::PMlp, LikelihoodKind::StudentT),
    (ModelFamily::KanPf, LikelihoodKind::None),
    (ModelFamily::MlpPf, LikelihoodKind::None),
];

fn small(family: ModelFamily, likelihood: LikelihoodKind, seed: u64) -> ModelConfig {
    ModelConfig {
        context: 12,
        horizon: 3,
        hidden_sizes: vec![5, 4],
        seed,
        ..ModelConfig::defaults(family, likelihood)
    }
}

fn context(shift: f64) -> Vec<f64> {
    (0..12).map(|i| 40.0 + 9.0 * (i as f64 * 0.7).sin() + shift).collect()
}

#[test]
fn default_parameter_counts_sit_in_reported_bands() {
    for (f, l) in FAMILIES {
        let n = count_parameters(&ModelConfig::defaults(f, l));
        if f == ModelFamily::PKan {
            assert!((82_000..=90_000).contains(&n), "{f:?} {l:?}: {n}");
        }
        if f == ModelFamily::PMlp {
            assert!(n > 240_000, "{f:?} {l:?}: {n}");
        }
    }
}

#[test]
fn count_matches_flattened_length_over_config_grid() {
    for (f, l) in FAMILIES {
        for hidden in [vec![], vec![3], vec![6, 2], vec![4, 4, 4]] {
            for (c, h) in [(1, 1), (7, 2), (24, 4)] {
                for r in [4, 6] {
                    let mut cfg = ModelConfig { context: c, horizon: h, hidden_sizes: hidden.clone(), ..ModelConfig::defaults(f, l) };
                    cfg.spline.num_basis = r;
                    let m = ModelState::new(cfg.clone(), Standardizer::identity()).unwrap();
                    assert_eq!(count_parameters(&cfg), m.flatten().len());
                    assert_eq!(m.num_parameters(), m.flatten().len());
                }
            }
        }
    }
}

#[test]
fn predictions_are_bitwise_deterministic() {
    for (f, l) in FAMILIES {
        let a = ModelState::new(small(f, l, 3), Standardizer { mean: 40.0, std: 6.0 }).unwrap();
        let b = ModelState::new(small(f, l, 3), Standardizer { mean: 40.0, std: 6.0 }).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        let ctx = context(0.0);
        assert_eq!(a.predict(&ctx).unwrap(), a.predict(&ctx).unwrap());
        assert_eq!(a.predict(&ctx).unwrap(), b.predict(&ctx).unwrap());
        let c = ModelState::new(small(f, l, 4), Standardizer { mean: 40.0, std: 6.0 }).unwrap();
        assert_ne!(a.flatten(), c.flatten());
    }
}

#[test]
fn batch_and_single_predictions_agree() {
    let m = ModelState::new(small(ModelFamily::PKan, LikelihoodKind::StudentT, 1), Standardizer { mean: 40.0, std: 6.0 }).unwrap();
    let (a, b) = (context(0.0), context(3.0));
    let batch = m.predict_batch(&[&a, &b]).unwrap();
    for (p, ctx) in batch.iter().zip([&a, &b]) {
        let single = m.predict(ctx).unwrap();
        match (p, single) {
            (Prediction::Distribution(x), Prediction::Distribution(y)) => {
                for i in 0..3 {
                    assert!((x.mu[i] - y.mu[i]).abs() < 1e-12);
                    assert!((x.sigma[i] - y.sigma[i]).abs() < 1e-12);
                }
            }
            _ => panic!("expected distributions"),
        }
    }
}

#[test]
fn shifting_series_and_standardizer_shifts_the_location() {
    for (f, l) in FAMILIES {
        let base = ModelState::new(small(f, l, 8), Standardizer { mean: 40.0, std: 6.0 }).unwrap();
        let k = 123.25;
        let mut moved = base.clone();
        moved.standardizer.mean += k;
        let (p, q) = (base.predict(&context(0.0)).unwrap(), moved.predict(&context(k)).unwrap());
        match (p, q) {
            (Prediction::Distribution(a), Prediction::Distribution(b)) => {
                for i in 0..3 {
                    assert!((b.mu[i] - a.mu[i] - k).abs() < 1e-9);
                    assert!((b.sigma[i] - a.sigma[i]).abs() < 1e-9);
                }
            }
            (Prediction::Point(a), Prediction::Point(b)) => {
                for i in 0..3 {
                    assert!((b[i] - a[i] - k).abs() < 1e-9);
                }
            }
            _ => panic!("prediction kind changed"),
        }
    }
}

#[test]
fn wrong_context_width_is_rejected() {
    let m = ModelState::new(small(ModelFamily::PMlp, LikelihoodKind::Gaussian, 0), Standardizer::identity()).unwrap();
    assert!(matches!(m.predict(&[1.0; 11]), Err(NetsError::InputWidth { expected: 12, actual: 11, .. })));
}

#[test]
fn model_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    for (f, l) in FAMILIES {
        let m = ModelState::new(small(f, l, 5), Standardizer { mean: 3.0, std: 2.0 }).unwrap();
        let path = dir.path().join(format!("{}.bin", f.label()));
        std::fs::write(&path, m.to_bytes()).unwrap();
        let back = ModelState::from_bytes(&std::fs::read(&path).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.checksum(), m.checksum());
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, ..ProptestConfig::default() })]
    #[test]
    fn heads_stay_in_range(seed in any::<u64>(), scale in prop::sample::select(vec![1.0, 10.0, 100.0, 1e3]), student in any::<bool>(), kan in any::<bool>()) {
        let family = if kan { ModelFamily::PKan } else { ModelFamily::PMlp };
        let lik = if student { LikelihoodKind::StudentT } else { LikelihoodKind::Gaussian };
        let mut m = ModelState::new(small(family, lik, seed), Standardizer { mean: 40.0, std: 6.0 }).unwrap();
        let flat: Vec<f64> = m.flatten().iter().map(|v| v * scale).collect();
        m.load_flat(&flat).unwrap();
        // Extreme weights may overflow; that surfaces as an error, never as
        // an out-of-range parameter.
        if let Ok(Prediction::Distribution(d)) = m.predict(&context(0.0)) {
            prop_assert!(d.sigma.iter().all(|s| *s > 0.0));
            if let Some(nu) = &d.nu {
                prop_assert!(nu.iter().all(|v| *v > 2.0));
            }
            for i in 0..3 {
                prop_assert!(d.step(i).is_ok());
            }
        }
    }
}
