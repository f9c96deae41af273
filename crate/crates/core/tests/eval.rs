use factorformer::eval::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scaling problem with a few gross outliers in the truth.
fn problem(seed: u64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = rng.random_range(-1.0..1.0);
    let b = rng.random_range(0.3..2.0) * if rng.random::<bool>() { 1.0 } else { -1.0 };
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    let mut y: Vec<f64> = x.iter().map(|v| a + b * v + 0.2 * rng.random_range(-1.0..1.0)).collect();
    for _ in 0..3 {
        let i = rng.random_range(0..n);
        y[i] += rng.random_range(5.0..20.0);
    }
    (x, y)
}

/// Odd sample sizes keep the L1 minimizer unique.
/// Brute-force grid oracle at 1e-3 resolution around the true minimizer.
fn grid_search(x: &[f64], y: &[f64], c0: (f64, f64)) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in -300..=300 {
        let g0 = c0.0 + i as f64 * 1e-3;
        for j in -300..=300 {
            let g1 = c0.1 + j as f64 * 1e-3;
            let f = l1_objective(x, y, g0, g1);
            if f < best.0 {
                best = (f, g0, g1);
            }
        }
    }
    best
}

/// Exact L1 fit: some optimal line passes through two data points.
fn vertex_search(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            if x[i] == x[j] {
                continue;
            }
            let g1 = (y[j] - y[i]) / (x[j] - x[i]);
            let g0 = y[i] - g1 * x[i];
            let f = l1_objective(x, y, g0, g1);
            if f < best.0 {
                best = (f, g0, g1);
            }
        }
    }
    best
}

#[test]
fn scaling_matches_grid_oracle() {
    for seed in 0..20 {
        let (x, y) = problem(seed, 61);
        let s = fit_scaling(&x, &y, 0..61).unwrap();
        let f = l1_objective(&x, &y, s.gamma0, s.gamma1);
        // grid centred on a coarse rounding of the answer, wide enough to contain it
        let c = ((s.gamma0 * 10.0).round() / 10.0, (s.gamma1 * 10.0).round() / 10.0);
        let (fg, _, _) = grid_search(&x, &y, c);
        assert!(f <= fg + 1e-9, "seed {seed}: solver {f} worse than grid {fg}");
        let (fv, g0, g1) = vertex_search(&x, &y);
        assert!((f - fv).abs() < 1e-9 * fv.max(1.0), "seed {seed}: {f} vs exact {fv}");
        assert!((g0 - s.gamma0).abs() < 1e-3 && (g1 - s.gamma1).abs() < 1e-3, "seed {seed}");
    }
}

#[test]
fn objective_not_worse_than_identity_or_ols() {
    for seed in 100..110 {
        let (x, y) = problem(seed, 80);
        let s = fit_scaling(&x, &y, 0..80).unwrap();
        let f = l1_objective(&x, &y, s.gamma0, s.gamma1);
        assert!(f <= l1_objective(&x, &y, 0.0, 1.0) + 1e-12);
        let (a, b) = factorformer::stats::ols_line(&x, &y).unwrap();
        assert!(f <= l1_objective(&x, &y, a, b) + 1e-12);
    }
}

fn scenario(seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<f64> = (0..200).map(|t| (t as f64 / 9.0).sin() + 0.3 * rng.random_range(-1.0..1.0)).collect();
    let t_hat: Vec<f64> = truth.iter().map(|v| 3.0 * v + 0.2 * rng.random_range(-1.0..1.0) - 1.0).collect();
    let k_hat: Vec<f64> = truth.iter().map(|v| -v + 0.5 * rng.random_range(-1.0..1.0)).collect();
    let o_hat: Vec<f64> = truth.iter().map(|v| v + 0.05 * rng.random_range(-1.0..1.0)).collect();
    (truth, t_hat, k_hat, o_hat)
}

#[test]
fn identities_on_constructed_inputs() {
    let (truth, _, k_hat, o_hat) = scenario(1);
    let m = metrics(&MetricsInput {
        x_true: &truth,
        scale_span: 0..100,
        test_span: 100..200,
        transformer: &truth,
        kalman: &k_hat,
        oracle: Some(&o_hat),
        ..Default::default()
    })
    .unwrap();
    assert!(m.mse["transformer"].abs() < 1e-20);
    assert!((m.r2["transformer"] - 1.0).abs() < 1e-12);
    assert!((m.fit - 100.0).abs() < 1e-9);
    let var_x = factorformer::stats::variance(&truth[100..200]);
    for (name, mse) in &m.mse {
        assert_eq!(m.r2[name], 1.0 - mse / var_x);
    }
    let parity = metrics(&MetricsInput {
        x_true: &truth,
        scale_span: 0..100,
        test_span: 100..200,
        transformer: &k_hat,
        kalman: &k_hat,
        oracle: Some(&o_hat),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(parity.fit, 0.0);
    assert_eq!(parity.gain, Some(0.0));
    let at_oracle = metrics(&MetricsInput {
        x_true: &truth,
        scale_span: 0..100,
        test_span: 100..200,
        transformer: &o_hat,
        kalman: &k_hat,
        oracle: Some(&o_hat),
        ..Default::default()
    })
    .unwrap();
    assert_eq!(at_oracle.gain, Some(100.0));
    let zero = vec![1.0; 200];
    assert!(metrics(&MetricsInput {
        x_true: &zero,
        scale_span: 0..100,
        test_span: 100..200,
        transformer: &o_hat,
        kalman: &k_hat,
        ..Default::default()
    })
    .is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn metrics_are_affine_invariant(seed in 0u64..1000, a in -5.0f64..5.0, b in prop_oneof![-4.0f64..-0.2, 0.2f64..4.0]) {
        let (truth, t_hat, k_hat, o_hat) = scenario(seed);
        let base = MetricsInput {
            x_true: &truth,
            scale_span: 0..100,
            test_span: 100..200,
            transformer: &t_hat,
            kalman: &k_hat,
            oracle: Some(&o_hat),
            ..Default::default()
        };
        let m0 = metrics(&base).unwrap();
        let moved: Vec<f64> = t_hat.iter().map(|v| a + b * v).collect();
        let m1 = metrics(&MetricsInput { transformer: &moved, ..base.clone() }).unwrap();
        prop_assert!((m0.fit - m1.fit).abs() < 1e-6);
        prop_assert!((m0.mse["transformer"] - m1.mse["transformer"]).abs() < 1e-6);
        prop_assert!((m0.r2["transformer"] - m1.r2["transformer"]).abs() < 1e-6);
        prop_assert!((m0.gain.unwrap() - m1.gain.unwrap()).abs() < 1e-6);
        prop_assert!((m0.corr - m1.corr).abs() < 1e-6);
    }
}

#[test]
fn metrics_json_keys() {
    let (truth, t_hat, k_hat, o_hat) = scenario(3);
    let m = metrics(&MetricsInput {
        x_true: &truth,
        scale_span: 0..100,
        test_span: 100..200,
        transformer: &t_hat,
        kalman: &k_hat,
        kalman_max: Some(&k_hat),
        oracle: Some(&o_hat),
        mean_y: Some(&k_hat),
        val_loss: Some(0.5),
        ..Default::default()
    })
    .unwrap();
    let j = m.to_json();
    for key in [
        "mse_transformer", "mse_kalman", "mse_kalman_max", "mse_oracle", "mse_mean_y", "r2_transformer", "fit",
        "fit_max", "gain", "corr", "val_loss", "discarded",
    ] {
        assert!(j.get(key).is_some(), "missing {key}");
    }
}
