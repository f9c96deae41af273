//! Experiment steps shared by the commands and the acceptance suite.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use factorformer::dgp::{simulate, DgpSpec, SimulatedDataset};
use factorformer::eval::{self, MetricsInput, MetricsReport};
use factorformer::mat::Mat;
use factorformer::net::Hyperparams;
use factorformer::particle::{apf_on_dataset, ApfOptions};
use factorformer::ssm::{estimate_mle, initial_guess, kalman_filter, kalman_max, LinearSsmParams, MleOptions};
use factorformer::train::{self, local_factor, Ensemble, TrainConfig, TrainData};
use factorformer::{Error, Result};

use crate::config::ExperimentConfig;

/// Writes through a temporary file and a rename, so readers never see a
/// partially written artifact.
pub fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn seed_dir(out: &Path, process: u8, seed: u64) -> PathBuf {
    out.join(format!("process{process}")).join(format!("seed{seed}"))
}

pub fn lambda_dir(seed_dir: &Path, lambda: f64) -> PathBuf {
    seed_dir.join(format!("lambda{lambda}"))
}

/// Rows `r` of a matrix.
pub fn rows(y: &Mat, r: Range<usize>) -> Mat {
    let k = y.cols();
    Mat::from_vec(r.len(), k, y.as_slice()[r.start * k..r.end * k].to_vec())
}

pub fn simulate_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SimulatedDataset> {
    let mut spec = DgpSpec::preset(cfg.process)?;
    if let Some(n) = cfg.n {
        spec.n = n;
    }
    simulate(&spec, seed)
}

/// Benchmark factor estimates over the whole series.
#[derive(Debug, Clone)]
pub struct Baselines {
    /// Kalman filter with maximum-likelihood parameters from the in-sample span.
    pub kalman: Vec<f64>,
    /// Kalman filter with the true linear(ized) parameters.
    pub kalman_max: Vec<f64>,
    /// Auxiliary particle filter with the true process.
    pub oracle: Vec<f64>,
    /// Cross-sectional mean of the standardized observables.
    pub mean_y: Vec<f64>,
    pub mle: Option<LinearSsmParams>,
}

pub fn row_means(y: &Mat) -> Vec<f64> {
    (0..y.rows()).map(|t| y.row(t).iter().sum::<f64>() / y.cols() as f64).collect()
}

/// Maximum likelihood on `fit_rows` of `y`, then filtering of all of `y`.
pub fn kalman_prior(y: &Mat, fit_rows: Range<usize>) -> Result<(LinearSsmParams, Vec<f64>)> {
    let y_fit = rows(y, fit_rows);
    let mle = estimate_mle(&y_fit, &initial_guess(&y_fit), &MleOptions::default())?;
    let filtered = kalman_filter(&mle.params, y)?.filtered_mean;
    Ok((mle.params, filtered))
}

pub fn compute_baselines(ds: &SimulatedDataset, n_particles: usize) -> Result<Baselines> {
    let (mle, kalman) = kalman_prior(&ds.y, ds.splits.in_sample())?;
    let kalman_max = kalman_filter(&kalman_max(&ds.spec)?, &ds.raw_y())?.filtered_mean;
    let oracle = apf_on_dataset(ds, &ApfOptions { n_particles, seed: ds.seed, ..ApfOptions::default() })?.mean;
    Ok(Baselines { kalman, kalman_max, oracle, mean_y: row_means(&ds.y), mle: Some(mle) })
}

pub fn baselines_csv(b: &Baselines) -> String {
    let mut s = String::from("t,x_kalman,x_kalman_max,x_oracle,x_mean\n");
    for t in 0..b.kalman.len() {
        let _ = writeln!(s, "{t},{},{},{},{}", b.kalman[t], b.kalman_max[t], b.oracle[t], b.mean_y[t]);
    }
    s
}

pub fn load_baselines(path: &Path) -> Result<Baselines> {
    let col = |c: &str| train::read_factor_csv(path, c);
    Ok(Baselines { kalman: col("x_kalman")?, kalman_max: col("x_kalman_max")?, oracle: col("x_oracle")?, mean_y: col("x_mean")?, mle: None })
}

/// In-sample span on which every model has an estimate.
pub fn scale_span(ds: &SimulatedDataset, hyper: &Hyperparams) -> Range<usize> {
    let ins = ds.splits.in_sample();
    ins.start.max(hyper.p - 1)..ins.end
}

/// Trains an ensemble on a simulated dataset with the Kalman prior. With
/// `track_test_fit`, each epoch's test Fit is recorded.
pub fn train_simulated(
    ds: &SimulatedDataset,
    prior: &[f64],
    hyper: &Hyperparams,
    cfg: &TrainConfig,
    jobs: usize,
    track_test_fit: bool,
) -> Result<Ensemble> {
    let data = TrainData {
        series: ds.y.clone(),
        prior: prior.to_vec(),
        train: vec![ds.splits.train.clone()],
        val: vec![ds.splits.val.clone()],
    };
    if !track_test_fit {
        return train::train_ensemble(&data, hyper, cfg, jobs, None);
    }
    let span = scale_span(ds, hyper);
    let test = ds.splits.test.clone();
    let (_, _, mse_k) = eval::scaled_test(prior, &ds.x_true, span.clone(), test.clone())?;
    let monitor = move |p: &factorformer::net::TransformerParams| -> Result<f64> {
        let f = local_factor(p, hyper, &ds.y)?;
        let (_, _, mse_t) = eval::scaled_test(&f, &ds.x_true, span.clone(), test.clone())?;
        Ok(eval::fit_percent(mse_t, mse_k))
    };
    train::train_ensemble(&data, hyper, cfg, jobs, Some(&monitor))
}

pub fn evaluate_simulated(
    ds: &SimulatedDataset,
    b: &Baselines,
    hyper: &Hyperparams,
    transformer: &[f64],
    transformer_max: Option<&[f64]>,
    val_loss: Option<f64>,
) -> Result<MetricsReport> {
    eval::metrics(&MetricsInput {
        x_true: &ds.x_true,
        scale_span: scale_span(ds, hyper),
        test_span: ds.splits.test.clone(),
        transformer,
        kalman: &b.kalman,
        kalman_max: Some(&b.kalman_max),
        oracle: Some(&b.oracle),
        mean_y: Some(&b.mean_y),
        transformer_max,
        val_loss,
    })
}

/// Mean of the runs' best validation losses.
pub fn mean_best_val_loss(e: &Ensemble) -> f64 {
    e.runs.iter().map(|r| r.history.best_val_loss()).sum::<f64>() / e.runs.len() as f64
}

pub fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} not found at {} (run the previous step first)", path.display())))
    }
}
