use mitr_core::data::LabelStyle;
use mitr_core::evalkit::{auilc, default_rates, pearson, regression_metrics, spearman};
use mitr_core::rng::seeded;
use mitr_core::Error;
use proptest::prelude::*;
use rand::Rng;

/// Dense midpoint Riemann sum of the piecewise-linear interpolant.
fn riemann(points: &[(f64, f64)], steps: usize) -> f64 {
    let mut total = 0.0;
    for w in points.windows(2) {
        let ((r0, v0), (r1, v1)) = (w[0], w[1]);
        let h = (r1 - r0) / steps as f64;
        for k in 0..steps {
            let s = (k as f64 + 0.5) / steps as f64;
            total += (v0 + s * (v1 - v0)) * h;
        }
    }
    total
}

fn random_curve(seed: u64, n: usize) -> Vec<(f64, f64)> {
    let mut r = seeded(seed);
    let mut rate = r.random_range(0.0..0.1);
    (0..n)
        .map(|_| {
            rate += r.random_range(0.01..0.2);
            (rate, r.random_range(-2.0..2.0))
        })
        .collect()
}

#[test]
fn trapezoid_matches_dense_riemann_on_random_curves() {
    for seed in 0..100 {
        let c = random_curve(seed, 10);
        let a = auilc(&c).unwrap();
        assert!((a - riemann(&c, 2000)).abs() < 1e-9, "seed {seed}");
    }
}

#[test]
fn constant_curve_is_a_rectangle() {
    let rates = default_rates(LabelStyle::Sims);
    let c: Vec<(f64, f64)> = rates.iter().map(|&r| (r, 0.8)).collect();
    assert_eq!(auilc(&c).unwrap(), 0.8 * (rates[rates.len() - 1] - rates[0]));
    let rates = default_rates(LabelStyle::Mosi);
    let c: Vec<(f64, f64)> = rates.iter().map(|&r| (r, 1.25)).collect();
    assert_eq!(auilc(&c).unwrap(), 1.25 * (rates[rates.len() - 1] - rates[0]));
}

#[test]
fn linear_curve_is_integrated_exactly() {
    let c: Vec<(f64, f64)> = (1..=5).map(|i| (i as f64 / 10.0, 2.0 * i as f64 / 10.0 + 1.0)).collect();
    // integral of 2r + 1 over [0.1, 0.5]
    assert!((auilc(&c).unwrap() - (0.25 - 0.01 + 0.4)).abs() < 1e-12);
}

#[test]
fn degenerate_inputs() {
    assert!(matches!(auilc(&[(0.1, 1.0)]), Err(Error::Parameter(_))));
    assert!(matches!(auilc(&[(0.2, 1.0), (0.2, 2.0)]), Err(Error::Parameter(_))));
    assert!(matches!(auilc(&[(0.3, 1.0), (0.2, 2.0)]), Err(Error::Parameter(_))));
}

proptest! {
    #[test]
    fn auilc_is_linear_in_values(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let v = random_curve(seed, 8);
        let w: Vec<(f64, f64)> = v.iter().enumerate().map(|(i, &(r, _))| (r, (i as f64).sin())).collect();
        let mix: Vec<(f64, f64)> = v.iter().zip(&w).map(|(&(r, x), &(_, y))| (r, a * x + b * y)).collect();
        let lhs = auilc(&mix).unwrap();
        let rhs = a * auilc(&v).unwrap() + b * auilc(&w).unwrap();
        prop_assert!((lhs - rhs).abs() < 1e-9);
    }

    #[test]
    fn metric_ranges(seed in any::<u64>(), n in 2usize..40, sims in any::<bool>()) {
        let mut r = seeded(seed);
        let hi = if sims { 1.0 } else { 3.0 };
        let truth: Vec<f64> = (0..n).map(|_| r.random_range(-hi..hi)).collect();
        let pred: Vec<f64> = (0..n).map(|_| r.random_range(-hi..hi)).collect();
        let style = if sims { LabelStyle::Sims } else { LabelStyle::Mosi };
        let m = regression_metrics(&pred, &truth, style).unwrap();
        prop_assert!(m.mae >= 0.0);
        prop_assert!((-1.0..=1.0).contains(&m.corr));
        for v in [m.acc2_nonneg, m.acc2_posneg, m.f1_nonneg, m.f1_posneg, m.acck] {
            prop_assert!((0.0..=1.0).contains(&v));
        }
    }
}

#[test]
fn negated_symmetric_predictions_anticorrelate() {
    let y = [-2.0, -1.0, 0.5, 1.0, 1.5];
    let neg: Vec<f64> = y.iter().map(|v| -v).collect();
    let m = regression_metrics(&neg, &y, LabelStyle::Mosi).unwrap();
    assert!((m.corr + 1.0).abs() < 1e-12);
    assert_eq!(pearson(&y, &y).map(|c| (c - 1.0).abs() < 1e-12), Some(true));
    assert!(spearman(&y, &neg).unwrap() < -0.999);
}

#[test]
fn too_few_points_is_rejected() {
    assert!(regression_metrics(&[1.0], &[1.0], LabelStyle::Mosi).is_err());
    assert!(regression_metrics(&[1.0, 2.0], &[1.0], LabelStyle::Mosi).is_err());
}
