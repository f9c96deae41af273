use factorformer::mat::Mat;
use factorformer::net::{
    forward, grad, batch_loss, load_checkpoint, save_checkpoint, Example, FactorInit, Hyperparams, Mode, TransformerParams,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny(seed: u64) -> Hyperparams {
    let mut h = Hyperparams::new(2);
    h.p = 3;
    h.d_model = 8;
    h.n_head = 2;
    h.d_k = 4;
    h.d_ff = 16;
    h.dropout = 0.1;
    if seed % 3 == 1 {
        h.factor_init = FactorInit::Variable(1);
    }
    if seed % 4 == 2 {
        h.n_layers = 2;
    }
    h
}

fn example(h: &Hyperparams, rng: &mut ChaCha8Rng) -> Example {
    let window = Mat::from_vec(h.p, h.k, (0..h.p * h.k).map(|_| rng.random_range(-2.0..2.0)).collect());
    Example {
        window,
        target: (0..h.k).map(|_| rng.random_range(-2.0..2.0)).collect(),
        prior: (0..h.p).map(|_| rng.random_range(-2.0..2.0)).collect(),
    }
}

/// Central finite differences on the full parameter vector, dropout masks
/// held fixed through the per-window seeds. Magnitudes below 1e-5 are
/// floored so that exact zeros compare against rounding noise sensibly.
fn max_rel_error(seed: u64) -> f64 {
    let h = tiny(seed);
    let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
    let mut params = TransformerParams::init(&h, seed).unwrap();
    // move norms and biases away from their initial values
    let mut flat = params.to_flat();
    for v in flat.iter_mut() {
        *v += rng.random_range(-0.1..0.1);
    }
    params.set_flat(&flat);
    let exs: Vec<Example> = (0..3).map(|_| example(&h, &mut rng)).collect();
    let batch: Vec<&Example> = exs.iter().collect();
    let seeds = [seed * 7 + 1, seed * 7 + 2, seed * 7 + 3];
    let lambda = 0.6;
    let (_, g) = grad(&params, &h, &batch, lambda, Some(&seeds)).unwrap();
    let analytic = g.to_flat();
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for i in 0..flat.len() {
        let mut f = flat.clone();
        f[i] += step;
        probe.set_flat(&f);
        let up = batch_loss(&probe, &h, &batch, lambda, Some(&seeds)).unwrap();
        f[i] -= 2.0 * step;
        probe.set_flat(&f);
        let dn = batch_loss(&probe, &h, &batch, lambda, Some(&seeds)).unwrap();
        let numeric = (up - dn) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(1e-5);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

#[test]
fn gradient_matches_finite_differences() {
    for seed in 0..10 {
        let e = max_rel_error(seed);
        assert!(e < 1e-4, "seed {seed}: max relative error {e:e}");
    }
}

#[test]
fn parameter_count_default_config() {
    let h = Hyperparams::new(5);
    let p = TransformerParams::init(&h, 0).unwrap();
    assert_eq!(p.n_params(), 25_952);
}

#[test]
fn attention_rows_sum_to_one_and_shapes() {
    let h = Hyperparams::new(5);
    let params = TransformerParams::init(&h, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let ex = example(&h, &mut rng);
        let t = forward(&ex.window, &params, &h, Mode::Infer).unwrap();
        assert_eq!(t.x_hat.len(), 9);
        assert_eq!(t.y_hat.len(), 45);
        assert_eq!(t.y_hat_next().len(), 5);
        for s in t.state_scores() {
            assert_eq!(s.shape(), (9, 45));
            for r in 0..s.rows() {
                assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        for s in t.measurement_scores() {
            assert_eq!(s.shape(), (45, 9));
        }
    }
}

#[test]
fn infer_is_deterministic_and_train_depends_on_seed() {
    let h = Hyperparams::new(3);
    let params = TransformerParams::init(&h, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ex = example(&h, &mut rng);
    let a = forward(&ex.window, &params, &h, Mode::Infer).unwrap();
    let b = forward(&ex.window, &params, &h, Mode::Infer).unwrap();
    assert_eq!(a.x_hat, b.x_hat);
    let mut r1 = ChaCha8Rng::seed_from_u64(5);
    let mut r2 = ChaCha8Rng::seed_from_u64(5);
    let mut r3 = ChaCha8Rng::seed_from_u64(6);
    let c = forward(&ex.window, &params, &h, Mode::Train(&mut r1)).unwrap();
    let d = forward(&ex.window, &params, &h, Mode::Train(&mut r2)).unwrap();
    let e = forward(&ex.window, &params, &h, Mode::Train(&mut r3)).unwrap();
    assert_eq!(c.x_hat, d.x_hat);
    assert_ne!(c.x_hat, e.x_hat);
}

#[test]
fn wrong_window_shape_is_rejected() {
    let h = Hyperparams::new(3);
    let params = TransformerParams::init(&h, 1).unwrap();
    assert!(forward(&Mat::zeros(8, 3), &params, &h, Mode::Infer).is_err());
}

#[test]
fn non_finite_input_reports_overflow() {
    let h = Hyperparams::new(2);
    let params = TransformerParams::init(&h, 1).unwrap();
    let w = Mat::filled(9, 2, f64::INFINITY);
    let err = forward(&w, &params, &h, Mode::Infer).unwrap_err();
    assert_eq!(err.kind(), "numeric_overflow");
}

#[test]
fn checkpoint_round_trip() {
    let mut h = Hyperparams::new(4);
    h.sinusoidal = true;
    let params = TransformerParams::init(&h, 11).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &h, &params).unwrap();
    let (h2, p2) = load_checkpoint(&path).unwrap();
    assert_eq!(h, h2);
    assert_eq!(params, p2);

    let text = std::fs::read_to_string(&path).unwrap().replace("w_factor 32 1", "w_factor 31 1");
    std::fs::write(&path, text).unwrap();
    assert!(load_checkpoint(&path).is_err());
}
