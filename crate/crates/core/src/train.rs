//! Windowing, the optimization loop and multi-run ensembles.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::net::{self, Example, ForwardTrace, Hyperparams, Mode, TensorKind, TransformerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch: usize,
    pub lr: f64,
    /// Epochs per scheduler cycle.
    pub t0: usize,
    /// Linear warmup epochs at the start of each cycle.
    pub warmup: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    /// Weight on the prior-information term.
    pub lambda: f64,
    pub runs: usize,
    pub patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            lr: 1e-4,
            t0: 100,
            warmup: 10,
            max_epochs: 1000,
            weight_decay: 0.015,
            lambda: 0.6,
            runs: 10,
            patience: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the coincident-index application (dropout 0.1 is set on
    /// the network hyperparameters separately).
    pub fn empirical() -> Self {
        Self { lambda: 0.2, weight_decay: 0.01, runs: 20, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training configuration: {m}")));
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad("lambda must lie in [0, 1]");
        }
        if self.batch == 0 || self.t0 == 0 || self.max_epochs == 0 || self.runs == 0 {
            return bad("batch, t0, max_epochs and runs must be positive");
        }
        if self.warmup >= self.t0 {
            return bad("warmup must be shorter than the cycle length t0");
        }
        if !(self.lr > 0.0 && self.weight_decay >= 0.0 && self.eps > 0.0) {
            return bad("lr and eps must be positive, weight_decay non-negative");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("moment decay rates must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Learning rate at a (fractional) epoch: linear ramp from 0 over the warmup,
/// then cosine decay to 0 at the end of each `t0`-epoch cycle.
pub fn lr_at(epoch: f64, cfg: &TrainConfig) -> f64 {
    let c = epoch.rem_euclid(cfg.t0 as f64);
    let w = cfg.warmup as f64;
    if c < w {
        cfg.lr * c / w
    } else {
        let frac = (c - w) / (cfg.t0 as f64 - w);
        0.5 * cfg.lr * (1.0 + (PI * frac).cos())
    }
}

/// Rolling windows inside each segment: a window ending at `t` covers
/// `t-P+1..=t` and targets `y_{t+1}`, and both lie in the same segment.
pub fn make_windows(series: &Mat, prior: &[f64], p: usize, segments: &[Range<usize>]) -> Result<Vec<Example>> {
    if prior.len() != series.rows() {
        return Err(Error::Config(format!(
            "prior series has {} periods, observables have {}",
            prior.len(),
            series.rows()
        )));
    }
    let mut out = Vec::new();
    for seg in segments {
        if seg.end > series.rows() {
            return Err(Error::Config(format!("segment {seg:?} exceeds the series length {}", series.rows())));
        }
        if seg.len() < p + 1 {
            continue;
        }
        for end in seg.start + p - 1..seg.end - 1 {
            let start = end + 1 - p;
            let mut w = Mat::zeros(p, series.cols());
            for r in 0..p {
                w.row_mut(r).copy_from_slice(series.row(start + r));
            }
            out.push(Example { window: w, target: series.row(end + 1).to_vec(), prior: prior[start..=end].to_vec() });
        }
    }
    Ok(out)
}

/// Loss of one traced forward pass; see [`net::mixed_loss`].
pub fn loss(trace: &ForwardTrace, target: &[f64], prior: &[f64], lambda: f64) -> f64 {
    net::mixed_loss(&trace.x_hat, prior, trace.y_hat_next(), target, lambda).0
}

/// Adaptive-moment optimizer with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: TransformerParams,
    v: TransformerParams,
    kinds: Vec<TensorKind>,
    step: u64,
}

impl AdamW {
    pub fn new(params: &TransformerParams, hyper: &Hyperparams) -> Self {
        let kinds = params.named(hyper.sinusoidal).into_iter().map(|(_, k, _)| k).collect();
        Self { m: params.zeros_like(), v: params.zeros_like(), kinds, step: 0 }
    }

    pub fn update(&mut self, params: &mut TransformerParams, grad: &TransformerParams, lr: f64, cfg: &TrainConfig) {
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let g = grad.tensors();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for ((((p, g), m), v), kind) in params.tensors_mut().into_iter().zip(g).zip(ms).zip(vs).zip(&self.kinds) {
            if *kind == TensorKind::Frozen {
                continue;
            }
            let decay = if *kind == TensorKind::Weight { cfg.weight_decay } else { 0.0 };
            let (p, g, m, v) = (p.as_mut_slice(), g.as_slice(), m.as_mut_slice(), v.as_mut_slice());
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= lr * (mh / (vh.sqrt() + cfg.eps) + decay * p[i]);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub test_fit: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stop_reason: StopReason,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs[self.best_epoch].val_loss
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn test_fits(&self) -> Vec<Option<f64>> {
        self.epochs.iter().map(|e| e.test_fit).collect()
    }

    pub fn to_csv(&self) -> String {
        let with_fit = self.epochs.iter().any(|e| e.test_fit.is_some());
        let mut s = String::from(if with_fit { "epoch,train_loss,val_loss,test_fit\n" } else { "epoch,train_loss,val_loss\n" });
        for e in &self.epochs {
            let _ = write!(s, "{},{},{}", e.epoch, e.train_loss, e.val_loss);
            if with_fit {
                let _ = write!(s, ",{}", e.test_fit.map(|f| f.to_string()).unwrap_or_default());
            }
            s.push('\n');
        }
        s
    }
}

/// Validation loss with dropout off: the mean absolute error of the
/// next-observation prediction. When `lambda == 1` the prediction head
/// receives no gradient and that error carries no information, so the
/// prior-information distance is used instead.
pub fn validation_loss(params: &TransformerParams, hyper: &Hyperparams, examples: &[Example], lambda: f64) -> Result<f64> {
    let weight = if lambda >= 1.0 { 1.0 } else { 0.0 };
    let mut total = 0.0;
    for ex in examples {
        let t = net::forward(&ex.window, params, hyper, Mode::Infer)?;
        total += loss(&t, &ex.target, &ex.prior, weight);
    }
    Ok(total / examples.len() as f64)
}

/// Per-epoch score on held-out data (higher is better), used to track test
/// accuracy in simulations.
pub type EpochMonitor<'a> = dyn Fn(&TransformerParams) -> Result<f64> + Sync + 'a;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub seed: u64,
    /// Parameters from the epoch with the lowest validation loss.
    pub params: TransformerParams,
    pub history: TrainHistory,
    /// Parameters from the epoch with the best monitor score, when monitored.
    pub best_test_params: Option<TransformerParams>,
}

/// One training run. Parameters are initialized from `run_seed`; shuffling
/// and dropout masks come from an independent stream of the same seed.
pub fn train_run(
    train: &[Example],
    val: &[Example],
    hyper: &Hyperparams,
    cfg: &TrainConfig,
    run_seed: u64,
    monitor: Option<&EpochMonitor>,
) -> Result<RunResult> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let mut params = TransformerParams::init(hyper, run_seed)?;
    let mut opt = AdamW::new(&params, hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let n_batches = train.len().div_ceil(cfg.batch);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, TransformerParams)> = None;
    let mut best_test: Option<(f64, TransformerParams)> = None;
    let mut stop_reason = StopReason::MaxEpochs;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch).enumerate() {
            let batch: Vec<&Example> = chunk.iter().map(|&i| &train[i]).collect();
            let seeds: Vec<u64> = chunk.iter().map(|_| rng.random()).collect();
            let (l, g) = net::grad(&params, hyper, &batch, cfg.lambda, Some(&seeds))
                .map_err(|e| Error::TrainingDiverged { epoch, detail: e.to_string() })?;
            if !l.is_finite() {
                return Err(Error::TrainingDiverged { epoch, detail: "non-finite training loss".into() });
            }
            train_total += l * chunk.len() as f64;
            let lr = lr_at(epoch as f64 + b as f64 / n_batches as f64, cfg);
            opt.update(&mut params, &g, lr, cfg);
        }
        let val_loss = validation_loss(&params, hyper, val, cfg.lambda)
            .map_err(|e| Error::TrainingDiverged { epoch, detail: e.to_string() })?;
        if !val_loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, detail: "non-finite validation loss".into() });
        }
        let test_fit = match monitor {
            Some(f) => {
                let score = f(&params)?;
                if best_test.as_ref().is_none_or(|(s, _)| score > *s) {
                    best_test = Some((score, params.clone()));
                }
                Some(score)
            }
            None => None,
        };
        epochs.push(EpochRecord { epoch, train_loss: train_total / train.len() as f64, val_loss, test_fit });
        if best.as_ref().is_none_or(|(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, params.clone()));
        }
        let best_epoch = best.as_ref().map_or(0, |b| b.0);
        if epoch - best_epoch >= cfg.patience {
            stop_reason = StopReason::Patience;
            break;
        }
    }
    let (best_epoch, _, best_params) = best.expect("at least one epoch");
    Ok(RunResult {
        seed: run_seed,
        params: best_params,
        history: TrainHistory { epochs, best_epoch, stop_reason },
        best_test_params: best_test.map(|(_, p)| p),
    })
}

/// Factor series by local filtering: the estimate for period `t` is the last
/// factor value of the window ending at `t`. The first `P-1` periods have no
/// full window and are NaN.
pub fn local_factor(params: &TransformerParams, hyper: &Hyperparams, series: &Mat) -> Result<Vec<f64>> {
    let p = hyper.p;
    let mut out = vec![f64::NAN; series.rows()];
    let mut w = Mat::zeros(p, series.cols());
    for end in p.saturating_sub(1)..series.rows() {
        for r in 0..p {
            w.row_mut(r).copy_from_slice(series.row(end + 1 - p + r));
        }
        out[end] = net::forward(&w, params, hyper, Mode::Infer)?.x_hat_last();
    }
    Ok(out)
}

/// Observables, the prior factor path and the segment layout for training.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub series: Mat,
    pub prior: Vec<f64>,
    pub train: Vec<Range<usize>>,
    pub val: Vec<Range<usize>>,
}

#[derive(Debug, Clone)]
pub struct Ensemble {
    pub runs: Vec<RunResult>,
    /// Per-run local-filtering factor over the whole series.
    pub factors: Vec<Vec<f64>>,
    /// Pointwise mean of `factors`.
    pub mean: Vec<f64>,
    /// Mean of the runs' best-on-test factors, when monitored.
    pub mean_best_test: Option<Vec<f64>>,
}

/// Seed of run `i` for a base seed.
pub fn run_seed(base: u64, i: usize) -> u64 {
    base.wrapping_mul(1_000_003).wrapping_add(i as u64)
}

pub fn pointwise_mean(series: &[Vec<f64>]) -> Vec<f64> {
    let n = series.first().map_or(0, |s| s.len());
    (0..n).map(|t| series.iter().map(|s| s[t]).sum::<f64>() / series.len() as f64).collect()
}

/// Trains `cfg.runs` independent runs (on at most `jobs` threads; results do
/// not depend on the thread count) and averages their factor series.
pub fn train_ensemble(
    data: &TrainData,
    hyper: &Hyperparams,
    cfg: &TrainConfig,
    jobs: usize,
    monitor: Option<&EpochMonitor>,
) -> Result<Ensemble> {
    cfg.validate()?;
    hyper.validate()?;
    let train = make_windows(&data.series, &data.prior, hyper.p, &data.train)?;
    let val = make_windows(&data.series, &data.prior, hyper.p, &data.val)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<(RunResult, Vec<f64>, Option<Vec<f64>>)>> = pool.install(|| {
        (0..cfg.runs)
            .into_par_iter()
            .map(|i| {
                let r = train_run(&train, &val, hyper, cfg, run_seed(cfg.seed, i), monitor)?;
                let f = local_factor(&r.params, hyper, &data.series)?;
                let fb = match &r.best_test_params {
                    Some(p) => Some(local_factor(p, hyper, &data.series)?),
                    None => None,
                };
                Ok((r, f, fb))
            })
            .collect()
    });
    let mut runs = Vec::new();
    let mut factors = Vec::new();
    let mut best_factors = Vec::new();
    for r in results {
        let (run, f, fb) = r?;
        runs.push(run);
        factors.push(f);
        if let Some(fb) = fb {
            best_factors.push(fb);
        }
    }
    let mean = pointwise_mean(&factors);
    let mean_best_test = (!best_factors.is_empty()).then(|| pointwise_mean(&best_factors));
    Ok(Ensemble { runs, factors, mean, mean_best_test })
}

fn fmt_opt(v: f64) -> String {
    if v.is_finite() {
        v.to_string()
    } else {
        String::new()
    }
}

/// `t,x_hat` with empty cells where no estimate exists.
pub fn factor_csv(x: &[f64]) -> String {
    let mut s = String::from("t,x_hat\n");
    for (t, v) in x.iter().enumerate() {
        let _ = writeln!(s, "{t},{}", fmt_opt(*v));
    }
    s
}

/// `t,x_mean,run_1..run_r`.
pub fn ensemble_csv(e: &Ensemble) -> String {
    let mut s = String::from("t,x_mean");
    for i in 0..e.factors.len() {
        let _ = write!(s, ",run_{}", i + 1);
    }
    s.push('\n');
    for t in 0..e.mean.len() {
        let _ = write!(s, "{t},{}", fmt_opt(e.mean[t]));
        for f in &e.factors {
            let _ = write!(s, ",{}", fmt_opt(f[t]));
        }
        s.push('\n');
    }
    s
}

/// Reads the first data column after `t` from a factor CSV; empty cells are NaN.
pub fn read_factor_csv(path: &Path, column: &str) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let idx = headers.iter().position(|h| h == column).ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        detail: format!("missing column `{column}`"),
    })?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let cell = rec.get(idx).unwrap_or("").trim();
        out.push(if cell.is_empty() {
            f64::NAN
        } else {
            cell.parse().map_err(|_| Error::Parse { path: path.to_path_buf(), detail: format!("bad number `{cell}`") })?
        });
    }
    Ok(out)
}
