//! Shock and error distributions, rescaled to mean zero and a target variance.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal, StudentT};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A zero-mean distribution family, before variance scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum ShockDist {
    Gaussian,
    StudentT { df: f64 },
    /// Two-piece (split-scale) Student t. `skew` is mapped onto the piece
    /// scale ratio so that `P(Z > 0) = 1/2 + atan(skew)/pi`, the positive-draw
    /// probability of an Azzalini skew-t with slant `skew`.
    SkewT { df: f64, skew: f64 },
}

impl ShockDist {
    pub fn validate(&self) -> Result<()> {
        match *self {
            ShockDist::Gaussian => Ok(()),
            ShockDist::StudentT { df } | ShockDist::SkewT { df, .. } if df > 2.0 && df.is_finite() => Ok(()),
            other => Err(Error::Config(format!("{other}: degrees of freedom must exceed 2"))),
        }
    }

    /// Draws one value with mean 0 and variance `target_var`.
    pub fn sample<R: Rng + ?Sized>(&self, target_var: f64, rng: &mut R) -> f64 {
        if target_var == 0.0 {
            return 0.0;
        }
        let scale = target_var.sqrt();
        match *self {
            ShockDist::Gaussian => scale * rng.sample::<f64, _>(StandardNormal),
            ShockDist::StudentT { df } => {
                let t: f64 = StudentT::new(df).expect("validated df").sample(rng);
                scale * t * ((df - 2.0) / df).sqrt()
            }
            ShockDist::SkewT { df, skew } => {
                let tp = TwoPieceT::new(df, skew);
                let t: f64 = StudentT::new(df).expect("validated df").sample(rng);
                let u: f64 = rng.random();
                let z = if u < tp.positive_prob() { tp.xi * t.abs() } else { -t.abs() / tp.xi };
                scale * (z - tp.mean()) / tp.variance().sqrt()
            }
        }
    }
}

impl fmt::Display for ShockDist {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ShockDist::Gaussian => write!(f, "gaussian"),
            ShockDist::StudentT { df } => write!(f, "t({df})"),
            ShockDist::SkewT { df, skew } => write!(f, "skew_t({df},{skew})"),
        }
    }
}

impl FromStr for ShockDist {
    type Err = Error;

    /// Parses `gaussian`, `t(<df>)` or `skew_t(<df>,<skew>)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::Config(format!("unsupported distribution descriptor `{s}`"));
        let args = |prefix: &str| -> Result<Vec<f64>> {
            let inner = s.strip_prefix(prefix).and_then(|r| r.strip_suffix(')')).ok_or_else(bad)?;
            inner.split(',').map(|a| a.trim().parse::<f64>().map_err(|_| bad())).collect()
        };
        let dist = if s == "gaussian" || s == "normal" {
            ShockDist::Gaussian
        } else if s.starts_with("t(") {
            match args("t(")?.as_slice() {
                [df] => ShockDist::StudentT { df: *df },
                _ => return Err(bad()),
            }
        } else if s.starts_with("skew_t(") {
            match args("skew_t(")?.as_slice() {
                [df, skew] => ShockDist::SkewT { df: *df, skew: *skew },
                _ => return Err(bad()),
            }
        } else {
            return Err(bad());
        };
        dist.validate()?;
        Ok(dist)
    }
}

/// Samples one shock; fails for invalid descriptors or negative variance.
pub fn sample_shock<R: Rng + ?Sized>(dist: &ShockDist, target_var: f64, rng: &mut R) -> Result<f64> {
    dist.validate()?;
    if !(target_var >= 0.0) {
        return Err(Error::Config(format!("shock variance must be non-negative, got {target_var}")));
    }
    Ok(dist.sample(target_var, rng))
}

/// Analytic moments of the two-piece t used by [`ShockDist::SkewT`].
#[derive(Debug, Clone, Copy)]
pub struct TwoPieceT {
    pub df: f64,
    pub xi: f64,
}

impl TwoPieceT {
    pub fn new(df: f64, skew: f64) -> Self {
        let p = 0.5 + skew.atan() / PI;
        Self { df, xi: (p / (1.0 - p)).sqrt() }
    }

    pub fn positive_prob(&self) -> f64 {
        let x2 = self.xi * self.xi;
        x2 / (1.0 + x2)
    }

    /// `E|T|` for a standard Student t.
    fn abs_mean(&self) -> f64 {
        let v = self.df;
        let ln = libm::lgamma((v + 1.0) / 2.0) - libm::lgamma(v / 2.0);
        2.0 * v.sqrt() * ln.exp() / (PI.sqrt() * (v - 1.0))
    }

    pub fn mean(&self) -> f64 {
        self.abs_mean() * (self.xi - 1.0 / self.xi)
    }

    pub fn variance(&self) -> f64 {
        let m2 = self.df / (self.df - 2.0);
        let x2 = self.xi * self.xi;
        m2 * (x2 + 1.0 / x2 - 1.0) - self.mean().powi(2)
    }
}

/// Vector measurement errors `u ~ family(0, cov)` sharing one covariance
/// square root. Student-t vectors use a common chi-square mixing variable.
#[derive(Debug, Clone)]
pub struct VectorErrors {
    root: DMatrix<f64>,
}

impl VectorErrors {
    /// Builds a square root `L` with `L L' = cov`, valid for singular PSD input.
    pub fn new(cov: &DMatrix<f64>) -> Self {
        let root = match cov.clone().cholesky() {
            Some(ch) => ch.l(),
            None => {
                let eig = cov.clone().symmetric_eigen();
                let mut v = eig.eigenvectors.clone();
                for (j, lam) in eig.eigenvalues.iter().enumerate() {
                    let s = lam.max(0.0).sqrt();
                    v.column_mut(j).scale_mut(s);
                }
                v
            }
        };
        Self { root }
    }

    pub fn dim(&self) -> usize {
        self.root.nrows()
    }

    pub fn sample<R: Rng + ?Sized>(&self, dist: &ShockDist, rng: &mut R) -> Result<DVector<f64>> {
        let k = self.dim();
        let z = DVector::from_iterator(k, (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let u = &self.root * z;
        match *dist {
            ShockDist::Gaussian => Ok(u),
            ShockDist::StudentT { df } => {
                let w: f64 = ChiSquared::new(df).expect("validated df").sample(rng);
                Ok(u * (((df - 2.0) / df).sqrt() / (w / df).sqrt()))
            }
            ShockDist::SkewT { .. } => {
                Err(Error::Config("measurement errors support gaussian and t families only".into()))
            }
        }
    }
}

/// Log density of vector errors with covariance `cov`, for particle weighting.
#[derive(Debug, Clone)]
pub struct VectorErrorDensity {
    chol: DMatrix<f64>,
    log_det: f64,
    dist: ShockDist,
    norm_const: f64,
}

impl VectorErrorDensity {
    pub fn new(cov: &DMatrix<f64>, dist: ShockDist) -> Result<Self> {
        let k = cov.nrows() as f64;
        let (scale, norm_const) = match dist {
            ShockDist::Gaussian => (1.0, -0.5 * k * (2.0 * PI).ln()),
            ShockDist::StudentT { df } => (
                (df - 2.0) / df,
                libm::lgamma((df + k) / 2.0) - libm::lgamma(df / 2.0) - 0.5 * k * (df * PI).ln(),
            ),
            ShockDist::SkewT { .. } => {
                return Err(Error::Config("measurement errors support gaussian and t families only".into()))
            }
        };
        let shape = cov * scale;
        let chol = shape
            .cholesky()
            .ok_or_else(|| Error::Config("measurement covariance must be positive definite".into()))?
            .l();
        let log_det = 2.0 * chol.diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(Self { chol, log_det, dist, norm_const })
    }

    pub fn log_pdf(&self, residual: &[f64]) -> f64 {
        let k = residual.len();
        // forward substitution L z = r
        let mut z = [0.0f64; 16];
        let mut z_heap;
        let z: &mut [f64] = if k <= 16 {
            &mut z[..k]
        } else {
            z_heap = vec![0.0; k];
            &mut z_heap
        };
        let mut quad = 0.0;
        for i in 0..k {
            let mut s = residual[i];
            for j in 0..i {
                s -= self.chol[(i, j)] * z[j];
            }
            z[i] = s / self.chol[(i, i)];
            quad += z[i] * z[i];
        }
        match self.dist {
            ShockDist::Gaussian => self.norm_const - 0.5 * self.log_det - 0.5 * quad,
            ShockDist::StudentT { df } => {
                self.norm_const - 0.5 * self.log_det - 0.5 * (df + k as f64) * (quad / df).ln_1p()
            }
            ShockDist::SkewT { .. } => unreachable!("rejected at construction"),
        }
    }
}
