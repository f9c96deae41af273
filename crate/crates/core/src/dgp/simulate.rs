//! Simulation, standardization, sample splits and dataset files.

use std::fs;
use std::ops::Range;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::process::{DgpSpec, STATE_LAGS};
use super::shocks::VectorErrors;
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::stats;

/// Contiguous train / validation / test index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl Splits {
    /// Training and validation combined.
    pub fn in_sample(&self) -> Range<usize> {
        self.train.start..self.val.end
    }
}

/// The test block occupies the last `test` indices, preceded directly by
/// `train_total` in-sample observations of which the trailing `val_frac` are
/// held out for validation.
pub fn split(n: usize, train_total: usize, test: usize, val_frac: f64) -> Result<Splits> {
    if n < train_total + test {
        return Err(Error::Config(format!(
            "series of length {n} is shorter than train ({train_total}) plus test ({test})"
        )));
    }
    if !(0.0..1.0).contains(&val_frac) {
        return Err(Error::Config(format!("validation fraction {val_frac} outside [0, 1)")));
    }
    let start = n - train_total - test;
    let n_val = (train_total as f64 * val_frac).round() as usize;
    let val_start = start + train_total - n_val;
    Ok(Splits { train: start..val_start, val: val_start..start + train_total, test: start + train_total..n })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub spec: DgpSpec,
    pub seed: u64,
    /// `N x k` standardized observables.
    pub y: Mat,
    /// Latent factor on its original scale.
    pub x_true: Vec<f64>,
    pub regime: Option<Vec<u8>>,
    pub splits: Splits,
    pub y_mean: Vec<f64>,
    pub y_sd: Vec<f64>,
    /// Raw observables of the last burn-in periods, oldest first.
    pub presample: Vec<Vec<f64>>,
    /// Measurement error covariance used in the simulation.
    pub cov: DMatrix<f64>,
}

impl SimulatedDataset {
    pub fn n(&self) -> usize {
        self.y.rows()
    }

    pub fn k(&self) -> usize {
        self.y.cols()
    }

    /// Observables on their original scale.
    pub fn raw_y(&self) -> Mat {
        let mut raw = self.y.clone();
        for t in 0..raw.rows() {
            for (i, v) in raw.row_mut(t).iter_mut().enumerate() {
                *v = *v * self.y_sd[i] + self.y_mean[i];
            }
        }
        raw
    }
}

/// Simulates `burn_in + n` periods, drops the burn-in and standardizes each
/// observable over the retained span.
pub fn simulate(spec: &DgpSpec, seed: u64) -> Result<SimulatedDataset> {
    let calib = spec.calibrate()?;
    let k = spec.k();
    let total = spec.burn_in + spec.n;
    let errors = VectorErrors::new(&calib.cov);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut state = spec.initial_state();
    let mut lags: [Vec<f64>; STATE_LAGS] = std::array::from_fn(|_| vec![0.0; k]);
    let mut raw = Vec::with_capacity(spec.n * k);
    let mut x_true = Vec::with_capacity(spec.n);
    let mut regimes = Vec::with_capacity(spec.n);
    let mut presample = Vec::new();
    let mut y_t = vec![0.0; k];

    for step in 0..total {
        state = spec.advance(&state, &mut rng);
        spec.measurement_mean(state.x[0], state.regime, &lags, &mut y_t);
        let u = errors.sample(&spec.error_dist(state.regime), &mut rng)?;
        for (v, e) in y_t.iter_mut().zip(u.iter()) {
            *v += e;
        }
        if !state.x[0].is_finite() || y_t.iter().any(|v| !v.is_finite()) {
            return Err(Error::SimulationDiverged { step });
        }
        lags.rotate_right(1);
        lags[0].copy_from_slice(&y_t);
        if step >= spec.burn_in {
            raw.extend_from_slice(&y_t);
            x_true.push(state.x[0]);
            regimes.push(state.regime);
        } else if step + STATE_LAGS >= spec.burn_in {
            presample.push(y_t.clone());
        }
    }

    let mut y = Mat::from_vec(spec.n, k, raw);
    let (y_mean, y_sd) = standardize_columns(&mut y);
    let splits = split(spec.n, 800, 1000, 0.2)
        .or_else(|_| split(spec.n, spec.n.saturating_sub(spec.n / 2), spec.n / 2, 0.2))?;
    Ok(SimulatedDataset {
        spec: spec.clone(),
        seed,
        y,
        x_true,
        regime: spec.regime.as_ref().map(|_| regimes),
        splits,
        y_mean,
        y_sd,
        presample,
        cov: calib.cov,
    })
}

/// Standardizes every column with population moments; zero-variance columns
/// are only centred (their sd is reported as 0).
pub fn standardize_columns(y: &mut Mat) -> (Vec<f64>, Vec<f64>) {
    let (n, k) = y.shape();
    let mut means = Vec::with_capacity(k);
    let mut sds = Vec::with_capacity(k);
    for i in 0..k {
        let mut col = y.col(i);
        let m = stats::mean(&col);
        let sd = stats::std_dev(&col);
        for v in col.iter_mut() {
            *v -= m;
            if sd > 0.0 {
                *v /= sd;
            }
        }
        for (t, v) in col.into_iter().enumerate().take(n) {
            y.set(t, i, v);
        }
        means.push(m);
        sds.push(sd);
    }
    (means, sds)
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    spec: DgpSpec,
    seed: u64,
    splits: Splits,
    y_mean: Vec<f64>,
    y_sd: Vec<f64>,
    presample: Vec<Vec<f64>>,
    cov: Vec<Vec<f64>>,
}

const DATASET_FORMAT: &str = "factorformer-dataset-1";

/// Writes `dataset.csv` (`t,y1..yk,x_true[,regime]`) and `dataset.json`.
pub fn save_dataset(ds: &SimulatedDataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let k = ds.k();
    let mut w = csv::Writer::from_path(dir.join("dataset.csv"))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=k).map(|i| format!("y{i}")));
    header.push("x_true".into());
    if ds.regime.is_some() {
        header.push("regime".into());
    }
    w.write_record(&header)?;
    for t in 0..ds.n() {
        let mut rec = vec![t.to_string()];
        rec.extend(ds.y.row(t).iter().map(|v| v.to_string()));
        rec.push(ds.x_true[t].to_string());
        if let Some(r) = &ds.regime {
            rec.push(r[t].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    let manifest = Manifest {
        format: DATASET_FORMAT.into(),
        spec: ds.spec.clone(),
        seed: ds.seed,
        splits: ds.splits.clone(),
        y_mean: ds.y_mean.clone(),
        y_sd: ds.y_sd.clone(),
        presample: ds.presample.clone(),
        cov: (0..k).map(|i| ds.cov.row(i).iter().copied().collect()).collect(),
    };
    fs::write(dir.join("dataset.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<SimulatedDataset> {
    let json_path = dir.join("dataset.json");
    let text = fs::read_to_string(&json_path)
        .map_err(|e| Error::Data(format!("cannot read {}: {e}", json_path.display())))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != DATASET_FORMAT {
        return Err(Error::Parse { path: json_path, detail: format!("unknown format tag `{}`", m.format) });
    }
    let csv_path = dir.join("dataset.csv");
    let mut r = csv::Reader::from_path(&csv_path)?;
    let k = m.y_mean.len();
    let has_regime = r.headers()?.iter().any(|h| h == "regime");
    let parse = |s: &str, t: usize| -> Result<f64> {
        s.parse::<f64>()
            .map_err(|_| Error::Parse { path: csv_path.clone(), detail: format!("row {t}: bad number `{s}`") })
    };
    let (mut y, mut x, mut reg) = (Vec::new(), Vec::new(), Vec::new());
    for (t, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != k + 2 + usize::from(has_regime) {
            return Err(Error::Parse { path: csv_path.clone(), detail: format!("row {t}: wrong field count") });
        }
        for i in 0..k {
            y.push(parse(&rec[1 + i], t)?);
        }
        x.push(parse(&rec[1 + k], t)?);
        if has_regime {
            reg.push(parse(&rec[2 + k], t)? as u8);
        }
    }
    let n = x.len();
    let cov = DMatrix::from_fn(k, k, |i, j| m.cov[i][j]);
    Ok(SimulatedDataset {
        spec: m.spec,
        seed: m.seed,
        y: Mat::from_vec(n, k, y),
        x_true: x,
        regime: has_regime.then_some(reg),
        splits: m.splits,
        y_mean: m.y_mean,
        y_sd: m.y_sd,
        presample: m.presample,
        cov,
    })
}
