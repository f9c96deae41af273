//! Random measurement-error covariance `D R D`.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub sds: Vec<f64>,
    pub mean_corr: f64,
    pub jitter: f64,
}

impl CovarianceSpec {
    pub fn new(sds: Vec<f64>) -> Self {
        Self { sds, mean_corr: 0.3, jitter: 0.15 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.sds.is_empty() {
            return Err(Error::Config("covariance needs at least one standard deviation".into()));
        }
        if self.sds.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Config("measurement standard deviations must be finite and non-negative".into()));
        }
        if !(self.jitter >= 0.0) || !self.mean_corr.is_finite() {
            return Err(Error::Config("invalid correlation centre or jitter".into()));
        }
        Ok(())
    }
}

/// Draws a correlation matrix around `mean_corr`, repairs it to PSD if needed
/// and scales it by the standard deviations.
pub fn build_covariance<R: Rng + ?Sized>(spec: &CovarianceSpec, rng: &mut R) -> DMatrix<f64> {
    let k = spec.sds.len();
    let mut r = DMatrix::<f64>::identity(k, k);
    for i in 0..k {
        for j in 0..i {
            let noise = if spec.jitter > 0.0 { rng.random_range(-spec.jitter..spec.jitter) } else { 0.0 };
            let v = spec.mean_corr + noise;
            r[(i, j)] = v;
            r[(j, i)] = v;
        }
    }
    let r = nearest_correlation(r);
    let mut cov = DMatrix::zeros(k, k);
    for i in 0..k {
        for j in 0..k {
            cov[(i, j)] = spec.sds[i] * r[(i, j)] * spec.sds[j];
        }
        cov[(i, i)] = spec.sds[i] * spec.sds[i];
    }
    cov
}

/// Clips negative eigenvalues at zero and rescales back to a unit diagonal.
fn nearest_correlation(r: DMatrix<f64>) -> DMatrix<f64> {
    let k = r.nrows();
    let eig = r.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return r;
    }
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    let v = &eig.eigenvectors;
    let mut out = v * DMatrix::from_diagonal(&clipped) * v.transpose();
    let d: Vec<f64> = (0..k).map(|i| out[(i, i)].max(f64::MIN_POSITIVE).sqrt()).collect();
    for i in 0..k {
        for j in 0..k {
            out[(i, j)] /= d[i] * d[j];
        }
    }
    for i in 0..k {
        out[(i, i)] = 1.0;
        for j in 0..i {
            let m = 0.5 * (out[(i, j)] + out[(j, i)]);
            out[(i, j)] = m;
            out[(j, i)] = m;
        }
    }
    out
}
