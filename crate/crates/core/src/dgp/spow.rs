use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Parameters of the sign-preserving power function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpowParams {
    pub gamma: f64,
    pub c: f64,
    pub epsilon: f64,
}

impl SpowParams {
    pub const DEFAULT_EPSILON: f64 = 1e-4;

    pub fn new(gamma: f64, c: f64) -> Self {
        Self { gamma, c, epsilon: Self::DEFAULT_EPSILON }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !(self.c > 0.0) || !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!(
                "spow requires gamma > 0, c > 0, epsilon >= 0 (got {:?})",
                self
            )));
        }
        Ok(())
    }

    /// Returns a copy with the exponent multiplied by `factor`.
    pub fn with_gamma_scaled(self, factor: f64) -> Self {
        Self { gamma: self.gamma * factor, ..self }
    }
}

/// `c * sign(z) * ((|z/c| + eps)^gamma - eps^gamma)`.
///
/// Odd and strictly increasing; the epsilon shift removes the derivative kink
/// at zero while keeping `spow(0) == 0` exactly.
#[inline]
pub fn spow(z: f64, p: SpowParams) -> f64 {
    let mag = (z.abs() / p.c + p.epsilon).powf(p.gamma) - p.epsilon.powf(p.gamma);
    p.c * z.signum() * mag
}
