//! Process definitions: parameters, presets and the one-step transition.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::covariance::{build_covariance, CovarianceSpec};
use super::shocks::ShockDist;
use super::spow::{spow, SpowParams};
use crate::error::{Error, Result};
use crate::stats;

/// Number of state lags carried by every process (the maximum used).
pub const STATE_LAGS: usize = 3;

/// Two-state Markov switching. Regime `s` multiplies the first AR
/// coefficient, the state curvature, the loadings and the measurement
/// exponents by `scale[s]`, and draws shocks/errors from `shock[s]`/`error[s]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeSwitching {
    pub p01: f64,
    pub p10: f64,
    pub scale: [f64; 2],
    pub shock: [ShockDist; 2],
    pub error: [ShockDist; 2],
}

/// Nonlinear measurement link `beta_i * spow(x, gamma_i, c)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementCurve {
    pub gamma: Vec<f64>,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DgpSpec {
    pub process_id: u8,
    /// Retained sample length.
    pub n: usize,
    pub burn_in: usize,
    pub x0: f64,
    pub mu_x: f64,
    /// AR coefficients on `x_{t-1}, x_{t-2}, x_{t-3}`.
    pub alpha: [f64; STATE_LAGS],
    /// When set, the first lag enters through `spow(x_{t-1}, ..)`.
    pub state_curve: Option<SpowParams>,
    /// Coefficient on the previous shock.
    pub ma_coeff: f64,
    pub sigma_x: f64,
    pub shock: ShockDist,
    pub mu_y: Vec<f64>,
    pub beta: Vec<f64>,
    pub measurement_curve: Option<MeasurementCurve>,
    /// Own-lag coefficients of each observable on `y_{i,t-1..t-3}`.
    pub y_lag_coeffs: [f64; STATE_LAGS],
    pub error: ShockDist,
    /// Measurement error standard deviations; calibrated from a pilot run when absent.
    pub sds: Option<Vec<f64>>,
    /// Ratio of error sd to noise-free measurement sd used by the calibration.
    pub noise_ratio: f64,
    pub mean_corr: f64,
    pub jitter: f64,
    /// Seeds the correlation draw and the calibration pilot, so both are
    /// fixed per process and shared across simulation seeds.
    pub cov_seed: u64,
    pub pilot_len: usize,
    pub regime: Option<RegimeSwitching>,
}

const MU_Y_A: [f64; 5] = [0.79, -0.47, -0.26, 0.15, 0.82];
const BETA_A: [f64; 5] = [0.58, 1.56, 1.62, 1.23, 1.18];

impl DgpSpec {
    /// Parameterizations of the six benchmark processes.
    pub fn preset(process_id: u8) -> Result<Self> {
        let t10 = ShockDist::StudentT { df: 10.0 };
        let skew = ShockDist::SkewT { df: 10.0, skew: -2.0 };
        let base = DgpSpec {
            process_id,
            n: 1800,
            burn_in: 1000,
            x0: 0.0,
            mu_x: 0.0,
            alpha: [0.96, 0.0, 0.0],
            state_curve: None,
            ma_coeff: 0.0,
            sigma_x: 1.0,
            shock: ShockDist::Gaussian,
            mu_y: MU_Y_A.to_vec(),
            beta: BETA_A.to_vec(),
            measurement_curve: None,
            y_lag_coeffs: [0.0; 3],
            error: ShockDist::Gaussian,
            sds: None,
            noise_ratio: 0.5,
            mean_corr: 0.3,
            jitter: 0.15,
            cov_seed: 1000 + u64::from(process_id),
            pilot_len: 10_000,
            regime: None,
        };
        let curve = |gamma: [f64; 5], c: f64| Some(MeasurementCurve { gamma: gamma.to_vec(), c });
        let spec = match process_id {
            1 => DgpSpec {
                mu_y: vec![0.11, 0.61, 0.70, -0.74, 0.65],
                beta: vec![1.01, 1.25, 0.60, 0.98, 0.91],
                ..base
            },
            2 => DgpSpec {
                mu_y: vec![0.79, -0.47, -0.256, 0.146, 0.82],
                measurement_curve: curve([0.55, 1.37, 0.57, 1.48, 0.61], 0.77),
                error: t10,
                ..base
            },
            3 => DgpSpec {
                state_curve: Some(SpowParams::new(0.36, 0.13)),
                sigma_x: 1.2,
                shock: t10,
                ..base
            },
            4 => DgpSpec {
                state_curve: Some(SpowParams::new(0.8, 1.0)),
                sigma_x: 0.65,
                shock: t10,
                mu_y: vec![-0.46, -0.43, 0.24, 0.85, 0.10],
                beta: vec![1.41, 1.50, 1.60, 0.94, 0.51],
                measurement_curve: curve([1.08, 0.67, 1.03, 1.02, 1.06], 15.0),
                error: t10,
                ..base
            },
            5 => DgpSpec {
                alpha: [0.74, 0.15, 0.074],
                ma_coeff: 0.15,
                sigma_x: 0.387,
                shock: skew,
                measurement_curve: curve([0.68, 1.12, 0.70, 1.21, 0.75], 1.28),
                y_lag_coeffs: [0.2, 0.05, 0.02],
                error: t10,
                ..base
            },
            6 => DgpSpec {
                alpha: [0.74, 0.15, 0.074],
                state_curve: Some(SpowParams::new(0.8, 2.24)),
                sigma_x: 0.51,
                measurement_curve: curve([0.57, 1.34, 0.59, 1.45, 0.62], 1.83),
                y_lag_coeffs: [0.2, 0.05, 0.02],
                regime: Some(RegimeSwitching {
                    p01: 0.03,
                    p10: 0.01,
                    scale: [1.01, 0.98],
                    shock: [ShockDist::Gaussian, skew],
                    error: [ShockDist::Gaussian, t10],
                }),
                ..base
            },
            other => return Err(Error::Config(format!("unknown process id {other}; expected 1..6"))),
        };
        Ok(spec)
    }

    pub fn k(&self) -> usize {
        self.mu_y.len()
    }

    pub fn has_y_lags(&self) -> bool {
        self.y_lag_coeffs.iter().any(|&c| c != 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        let bad = |m: String| Err(Error::Config(m));
        if k == 0 {
            return bad("at least one observable is required".into());
        }
        if self.beta.len() != k {
            return bad(format!("beta has {} entries, mu_y has {k}", self.beta.len()));
        }
        if let Some(c) = &self.measurement_curve {
            if c.gamma.len() != k {
                return bad(format!("measurement exponents have {} entries, expected {k}", c.gamma.len()));
            }
            for &g in &c.gamma {
                SpowParams::new(g, c.c).validate()?;
            }
        }
        if let Some(sds) = &self.sds {
            if sds.len() != k {
                return bad(format!("sds has {} entries, expected {k}", sds.len()));
            }
        }
        if let Some(p) = &self.state_curve {
            p.validate()?;
        }
        if !(self.sigma_x >= 0.0 && self.sigma_x.is_finite()) {
            return bad("sigma_x must be finite and non-negative".into());
        }
        self.shock.validate()?;
        self.error.validate()?;
        if matches!(self.error, ShockDist::SkewT { .. }) {
            return bad("measurement errors support gaussian and t families only".into());
        }
        if let Some(r) = &self.regime {
            for p in [r.p01, r.p10] {
                if !(0.0..=1.0).contains(&p) {
                    return bad(format!("switch probability {p} outside [0, 1]"));
                }
            }
            for d in r.shock.iter().chain(&r.error) {
                d.validate()?;
            }
            if r.error.iter().any(|d| matches!(d, ShockDist::SkewT { .. })) {
                return bad("measurement errors support gaussian and t families only".into());
            }
        }
        if self.n == 0 {
            return bad("sample length must be positive".into());
        }
        Ok(())
    }

    pub fn regime_scale(&self, regime: u8) -> f64 {
        self.regime.as_ref().map_or(1.0, |r| r.scale[regime as usize])
    }

    pub fn shock_dist(&self, regime: u8) -> ShockDist {
        self.regime.as_ref().map_or(self.shock, |r| r.shock[regime as usize])
    }

    pub fn error_dist(&self, regime: u8) -> ShockDist {
        self.regime.as_ref().map_or(self.error, |r| r.error[regime as usize])
    }

    /// Draws the next regime given the current one.
    pub fn next_regime<R: Rng + ?Sized>(&self, regime: u8, rng: &mut R) -> u8 {
        match &self.regime {
            None => 0,
            Some(r) => {
                let p = if regime == 0 { r.p01 } else { r.p10 };
                let u: f64 = rng.random();
                if u < p {
                    1 - regime
                } else {
                    regime
                }
            }
        }
    }

    /// Deterministic part of the state equation for the next period.
    pub fn state_mean(&self, s: &LatentState, regime: u8) -> f64 {
        let scale = self.regime_scale(regime);
        let lag1 = match &self.state_curve {
            Some(p) => spow(s.x[0], p.with_gamma_scaled(scale)),
            None => s.x[0],
        };
        self.mu_x
            + self.alpha[0] * scale * lag1
            + self.alpha[1] * s.x[1]
            + self.alpha[2] * s.x[2]
            + self.ma_coeff * s.shock
    }

    /// One draw from the true transition.
    pub fn advance<R: Rng + ?Sized>(&self, s: &LatentState, rng: &mut R) -> LatentState {
        let regime = self.next_regime(s.regime, rng);
        let shock = self.shock_dist(regime).sample(self.sigma_x * self.sigma_x, rng);
        let x = self.state_mean(s, regime) + shock;
        LatentState { x: [x, s.x[0], s.x[1]], shock, regime }
    }

    /// The deterministic predictor used for look-ahead weights: regime kept,
    /// new shock at zero.
    pub fn predict(&self, s: &LatentState) -> LatentState {
        let x = self.state_mean(s, s.regime);
        LatentState { x: [x, s.x[0], s.x[1]], shock: 0.0, regime: s.regime }
    }

    /// Noise-free, lag-free part of observable `i`: `beta_i * f(x)`.
    pub fn signal(&self, x: f64, regime: u8, i: usize) -> f64 {
        let scale = self.regime_scale(regime);
        let link = match &self.measurement_curve {
            Some(c) => spow(x, SpowParams::new(c.gamma[i] * scale, c.c)),
            None => x,
        };
        self.beta[i] * scale * link
    }

    /// Conditional mean of raw observables given the state and the raw lags
    /// (`y_lags[l]` holds `y_{t-1-l}`).
    pub fn measurement_mean(&self, x: f64, regime: u8, y_lags: &[Vec<f64>; STATE_LAGS], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let ar: f64 = (0..STATE_LAGS).map(|l| self.y_lag_coeffs[l] * y_lags[l][i]).sum();
            *o = self.mu_y[i] + self.signal(x, regime, i) + ar;
        }
    }

    pub fn initial_state(&self) -> LatentState {
        LatentState { x: [self.x0; 3], shock: 0.0, regime: 0 }
    }

    /// Fixes the measurement error covariance for this process.
    pub fn calibrate(&self) -> Result<Calibration> {
        self.validate()?;
        let sds = match &self.sds {
            Some(s) => s.clone(),
            None => self.pilot_sds()?,
        };
        let cspec = CovarianceSpec { sds: sds.clone(), mean_corr: self.mean_corr, jitter: self.jitter };
        cspec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cov_seed);
        let cov = build_covariance(&cspec, &mut rng);
        Ok(Calibration { sds, cov })
    }

    fn pilot_sds(&self) -> Result<Vec<f64>> {
        let k = self.k();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cov_seed ^ 0x9E37_79B9_7F4A_7C15);
        let mut s = self.initial_state();
        for step in 0..self.burn_in {
            s = self.advance(&s, &mut rng);
            if !s.x[0].is_finite() {
                return Err(Error::SimulationDiverged { step });
            }
        }
        let mut cols = vec![Vec::with_capacity(self.pilot_len); k];
        for step in 0..self.pilot_len {
            s = self.advance(&s, &mut rng);
            for (i, col) in cols.iter_mut().enumerate() {
                let v = self.signal(s.x[0], s.regime, i);
                if !v.is_finite() {
                    return Err(Error::SimulationDiverged { step: self.burn_in + step });
                }
                col.push(v);
            }
        }
        Ok(cols.iter().map(|c| self.noise_ratio * stats::std_dev(c)).collect())
    }
}

/// Per-process measurement error scales and covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sds: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Latent state at one period: current and two previous factor values, the
/// current shock (for the MA term) and the regime label.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatentState {
    pub x: [f64; STATE_LAGS],
    pub shock: f64,
    pub regime: u8,
}
