use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::dgp::DgpSpec;
use crate::error::{Error, Result};

/// One-factor linear Gaussian state space:
/// `x_t = mu_x + alpha x_{t-1} + e_t`, `e_t ~ N(0, sigma_x^2)`,
/// `y_t = mu_y + beta x_t + u_t`, `u_t ~ N(0, R)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSsmParams {
    pub mu_x: f64,
    pub alpha: f64,
    pub sigma_x: f64,
    pub mu_y: Vec<f64>,
    pub beta: Vec<f64>,
    pub r: DMatrix<f64>,
}

impl LinearSsmParams {
    pub fn k(&self) -> usize {
        self.mu_y.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.k();
        if k == 0 || self.beta.len() != k || self.r.shape() != (k, k) {
            return Err(Error::Config(format!(
                "inconsistent dimensions: mu_y {k}, beta {}, R {:?}",
                self.beta.len(),
                self.r.shape()
            )));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.sigma_x >= 0.0) {
            return Err(Error::Config(format!("sigma_x {} must be non-negative", self.sigma_x)));
        }
        let all = [self.mu_x, self.alpha, self.sigma_x]
            .into_iter()
            .chain(self.mu_y.iter().copied())
            .chain(self.beta.iter().copied())
            .chain(self.r.iter().copied());
        if all.into_iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("state-space parameters must be finite".into()));
        }
        for i in 0..k {
            for j in 0..i {
                if (self.r[(i, j)] - self.r[(j, i)]).abs() > 1e-10 * (1.0 + self.r[(i, j)].abs()) {
                    return Err(Error::Config("measurement covariance must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Stationary mean and variance of the state (diffuse when `alpha = 1`).
    pub fn unconditional(&self) -> (f64, f64) {
        if self.alpha >= 1.0 {
            (0.0, super::DIFFUSE_VARIANCE)
        } else {
            (self.mu_x / (1.0 - self.alpha), self.sigma_x * self.sigma_x / (1.0 - self.alpha * self.alpha))
        }
    }

    /// Maps parameters for raw observables onto variables standardized as
    /// `(y - mean) / sd`.
    pub fn standardized(&self, mean: &[f64], sd: &[f64]) -> Self {
        let k = self.k();
        let s: Vec<f64> = sd.iter().map(|&v| if v > 0.0 { v } else { 1.0 }).collect();
        Self {
            mu_y: (0..k).map(|i| (self.mu_y[i] - mean[i]) / s[i]).collect(),
            beta: (0..k).map(|i| self.beta[i] / s[i]).collect(),
            r: DMatrix::from_fn(k, k, |i, j| self.r[(i, j)] / (s[i] * s[j])),
            ..self.clone()
        }
    }

    /// Writes `name = value` lines; vectors and the row-major `r` are comma separated.
    pub fn to_kv(&self) -> String {
        let list = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x.to_string()).collect::<Vec<_>>().join(", ");
        let mut out = String::new();
        let _ = writeln!(out, "k = {}", self.k());
        let _ = writeln!(out, "mu_x = {}", self.mu_x);
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "sigma_x = {}", self.sigma_x);
        let _ = writeln!(out, "mu_y = {}", list(&mut self.mu_y.iter().copied()));
        let _ = writeln!(out, "beta = {}", list(&mut self.beta.iter().copied()));
        let rt = self.r.transpose();
        let _ = writeln!(out, "r = {}", list(&mut rt.iter().copied()));
        out
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut fields = std::collections::HashMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `name = value`", n + 1)))?;
            fields.insert(key.trim().to_string(), value.trim().to_string());
        }
        let get = |name: &str| -> Result<Vec<f64>> {
            let raw = fields.get(name).ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
            raw.split(',')
                .map(|v| v.trim().parse::<f64>().map_err(|_| Error::Config(format!("bad value in `{name}`: {raw}"))))
                .collect()
        };
        let scalar = |name: &str| -> Result<f64> {
            match get(name)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(Error::Config(format!("`{name}` must be a scalar"))),
            }
        };
        let mu_y = get("mu_y")?;
        let k = mu_y.len();
        let r = get("r")?;
        if r.len() != k * k {
            return Err(Error::Config(format!("`r` needs {} entries, found {}", k * k, r.len())));
        }
        let p = Self {
            mu_x: scalar("mu_x")?,
            alpha: scalar("alpha")?,
            sigma_x: scalar("sigma_x")?,
            mu_y,
            beta: get("beta")?,
            r: DMatrix::from_row_slice(k, k, &r),
        };
        p.validate()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_kv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_kv(&text).map_err(|e| Error::Parse { path: path.to_path_buf(), detail: e.to_string() })
    }
}

/// The linear part of a simulated process with its true parameters.
///
/// Nonlinear links are replaced by the identity. For processes with several
/// state lags the AR coefficients are summed (capped below one), and own-lag
/// measurement dynamics are folded into long-run intercepts and loadings.
pub fn kalman_max(spec: &DgpSpec) -> Result<LinearSsmParams> {
    let calib = spec.calibrate()?;
    let alpha_sum: f64 = spec.alpha.iter().sum();
    let alpha = if spec.alpha[1] == 0.0 && spec.alpha[2] == 0.0 { spec.alpha[0] } else { alpha_sum.min(0.999) };
    let long_run = 1.0 / (1.0 - spec.y_lag_coeffs.iter().sum::<f64>());
    let p = LinearSsmParams {
        mu_x: spec.mu_x,
        alpha: alpha.clamp(0.0, 1.0),
        sigma_x: spec.sigma_x,
        mu_y: spec.mu_y.iter().map(|m| m * long_run).collect(),
        beta: spec.beta.iter().map(|b| b * long_run).collect(),
        r: calib.cov,
    };
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> LinearSsmParams {
        LinearSsmParams {
            mu_x: 0.1,
            alpha: 0.9,
            sigma_x: 0.7,
            mu_y: vec![0.5, -1.0 / 3.0],
            beta: vec![1.25, 0.8],
            r: DMatrix::from_row_slice(2, 2, &[0.4, 0.1, 0.1, 0.3]),
        }
    }

    #[test]
    fn kv_round_trip_is_exact() {
        let p = sample();
        let back = LinearSsmParams::from_kv(&p.to_kv()).unwrap();
        assert_eq!(p, back);
    }

    #[test]
    fn kv_rejects_missing_fields() {
        assert!(LinearSsmParams::from_kv("alpha = 0.5").is_err());
    }

    #[test]
    fn kalman_max_is_identity_on_process_one() {
        let spec = DgpSpec::preset(1).unwrap();
        let p = kalman_max(&spec).unwrap();
        assert_eq!(p.alpha, 0.96);
        assert_eq!(p.sigma_x, spec.sigma_x);
        assert_eq!(p.mu_y, spec.mu_y);
        assert_eq!(p.beta, spec.beta);
        assert_eq!(p.r, spec.calibrate().unwrap().cov);
        let p2 = kalman_max(&DgpSpec::preset(2).unwrap()).unwrap();
        assert_eq!(p2.beta, vec![0.58, 1.56, 1.62, 1.23, 1.18]);
    }
}
