use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Source of the initial factor series fed to the State Encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FactorInit {
    /// Pointwise mean over the observables at each lag.
    #[default]
    Mean,
    /// One observable's values.
    Variable(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    /// Context window length (lags).
    pub p: usize,
    /// Number of observables.
    pub k: usize,
    pub d_model: usize,
    pub n_head: usize,
    pub d_k: usize,
    pub d_ff: usize,
    /// Encoders per stack.
    pub n_layers: usize,
    pub dropout: f64,
    /// Down-weighting of positional and variable encodings.
    pub enc_scale: f64,
    /// Fixed sinusoidal positional encodings instead of learned ones.
    pub sinusoidal: bool,
    pub factor_init: FactorInit,
}

impl Hyperparams {
    pub fn new(k: usize) -> Self {
        Self {
            p: 9,
            k,
            d_model: 32,
            n_head: 4,
            d_k: 8,
            d_ff: 64,
            n_layers: 1,
            dropout: 0.15,
            enc_scale: 0.5,
            sinusoidal: false,
            factor_init: FactorInit::Mean,
        }
    }

    /// Width of the concatenated heads.
    pub fn d_attn(&self) -> usize {
        self.n_head * self.d_k
    }

    pub fn n_tokens(&self) -> usize {
        self.p * self.k
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("hyperparameters: {m}")));
        if self.p == 0 || self.k == 0 {
            return bad("p and k must be positive");
        }
        if self.d_model == 0 || self.n_head == 0 || self.d_k == 0 || self.n_layers == 0 {
            return bad("d_model, n_head, d_k and n_layers must be positive");
        }
        if self.d_ff < self.d_model {
            return bad("d_ff must be at least d_model");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if !(self.enc_scale >= 0.0 && self.enc_scale.is_finite()) {
            return bad("enc_scale must be finite and non-negative");
        }
        if self.sinusoidal && self.d_model % 2 == 1 {
            return bad("sinusoidal encodings need an even d_model");
        }
        if let FactorInit::Variable(i) = self.factor_init {
            if i >= self.k {
                return bad("factor initialization variable out of range");
            }
        }
        Ok(())
    }
}
