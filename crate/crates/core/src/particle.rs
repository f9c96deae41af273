//! Auxiliary particle filter driven by the true simulation model.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dgp::{DgpSpec, LatentState, SimulatedDataset, VectorErrorDensity, STATE_LAGS};
use crate::error::{Error, Result};
use crate::mat::Mat;

/// Effective sample size `1 / sum(w^2)` of normalized weights.
pub fn ess(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one sweep over the cumulative weights at the
/// positions `(i + u) / n`, `i = 0..n`.
pub fn systematic_resample(weights: &[f64], u: f64) -> Vec<usize> {
    let n = weights.len();
    let mut out = Vec::with_capacity(n);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..n {
        let pos = (i as f64 + u) / n as f64;
        while pos > cum && j + 1 < n {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

#[derive(Debug, Clone)]
pub struct ApfOptions {
    pub n_particles: usize,
    /// Resample after the correction step when `ESS / Np` falls below this.
    pub ess_threshold: f64,
    /// Roughening noise sd as a fraction of the weighted particle sd.
    pub roughening: f64,
    pub seed: u64,
}

impl Default for ApfOptions {
    fn default() -> Self {
        Self { n_particles: 10_000, ess_threshold: 0.5, roughening: 0.05, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ApfOutput {
    /// Weighted particle mean per period.
    pub mean: Vec<f64>,
    /// Effective sample size after the correction step, per period.
    pub ess: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ParticleCloud {
    pub particles: Vec<LatentState>,
    pub weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn weighted_mean(&self) -> f64 {
        self.particles.iter().zip(&self.weights).map(|(p, w)| w * p.x[0]).sum()
    }

    fn weighted_sd(&self) -> f64 {
        let m = self.weighted_mean();
        let v: f64 = self.particles.iter().zip(&self.weights).map(|(p, w)| w * (p.x[0] - m).powi(2)).sum();
        v.max(0.0).sqrt()
    }

    fn resample(&mut self, u: f64) {
        let idx = systematic_resample(&self.weights, u);
        self.particles = idx.iter().map(|&i| self.particles[i]).collect();
        let w = 1.0 / self.particles.len() as f64;
        self.weights.iter_mut().for_each(|x| *x = w);
    }
}

/// Normalizes log weights in place into probabilities; `None` when every
/// weight underflows.
fn normalize_log(logw: &[f64], out: &mut Vec<f64>) -> Option<()> {
    let max = logw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return None;
    }
    out.clear();
    out.extend(logw.iter().map(|l| (l - max).exp()));
    let total: f64 = out.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    out.iter_mut().for_each(|w| *w /= total);
    Some(())
}

struct Measurement<'a> {
    spec: &'a DgpSpec,
    densities: [VectorErrorDensity; 2],
    buf: Vec<f64>,
}

impl Measurement<'_> {
    fn log_lik(&mut self, s: &LatentState, y: &[f64], lags: &[Vec<f64>; STATE_LAGS]) -> f64 {
        self.spec.measurement_mean(s.x[0], s.regime, lags, &mut self.buf);
        for (b, v) in self.buf.iter_mut().zip(y) {
            *b = v - *b;
        }
        self.densities[s.regime as usize].log_pdf(&self.buf)
    }
}

/// Runs the filter over raw observables `y`, with `presample` holding the
/// raw observations just before the first row (oldest first).
pub fn apf_filter(
    spec: &DgpSpec,
    cov: &DMatrix<f64>,
    y: &Mat,
    presample: &[Vec<f64>],
    opts: &ApfOptions,
) -> Result<ApfOutput> {
    spec.validate()?;
    let k = spec.k();
    if y.cols() != k || cov.shape() != (k, k) {
        return Err(Error::Config("observation width does not match the process".into()));
    }
    if opts.n_particles == 0 {
        return Err(Error::Config("particle count must be positive".into()));
    }
    let np = opts.n_particles;
    let mut meas = Measurement {
        spec,
        densities: [
            VectorErrorDensity::new(cov, spec.error_dist(0))?,
            VectorErrorDensity::new(cov, spec.error_dist(1))?,
        ],
        buf: vec![0.0; k],
    };

    // Initial cloud: independent burn-in runs from the fixed starting state.
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cloud = ParticleCloud { particles: Vec::with_capacity(np), weights: vec![1.0 / np as f64; np] };
    for _ in 0..np {
        let mut s = spec.initial_state();
        for _ in 0..spec.burn_in {
            s = spec.advance(&s, &mut rng);
        }
        cloud.particles.push(s);
    }

    let mut lags: [Vec<f64>; STATE_LAGS] = std::array::from_fn(|l| {
        presample.len().checked_sub(l + 1).map_or_else(|| vec![0.0; k], |i| presample[i].clone())
    });
    let n = y.rows();
    let mut out = ApfOutput { mean: Vec::with_capacity(n), ess: Vec::with_capacity(n) };
    let mut logw = vec![0.0; np];
    let mut probs = Vec::with_capacity(np);
    let mut predicted_ll = vec![0.0; np];

    for t in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        rng.set_stream(t as u64 + 1);
        let yt = y.row(t);

        // 1. look-ahead weights at the deterministic prediction
        for j in 0..np {
            let pred = spec.predict(&cloud.particles[j]);
            predicted_ll[j] = meas.log_lik(&pred, yt, &lags);
            logw[j] = cloud.weights[j].ln() + predicted_ll[j];
        }
        normalize_log(&logw, &mut probs).ok_or(Error::WeightCollapse { period: t })?;

        // 2. resample on the look-ahead weights
        let u: f64 = rng.random();
        let idx = systematic_resample(&probs, u);

        // 3. propagate through the true transition, 4. correct the weights
        let mut next = Vec::with_capacity(np);
        for (j, &i) in idx.iter().enumerate() {
            let s = spec.advance(&cloud.particles[i], &mut rng);
            logw[j] = meas.log_lik(&s, yt, &lags) - predicted_ll[i];
            next.push(s);
        }
        cloud.particles = next;
        normalize_log(&logw, &mut probs).ok_or(Error::WeightCollapse { period: t })?;
        std::mem::swap(&mut cloud.weights, &mut probs);
        out.ess.push(ess(&cloud.weights));

        // 5. adaptive resampling, 6. roughening
        if ess(&cloud.weights) / (np as f64) < opts.ess_threshold {
            let u: f64 = rng.random();
            cloud.resample(u);
        }
        let sd = opts.roughening * cloud.weighted_sd();
        if sd > 0.0 {
            for p in cloud.particles.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                p.x[0] += sd * z;
            }
        }

        // 7. weighted mean
        let m = cloud.weighted_mean();
        if !m.is_finite() {
            return Err(Error::WeightCollapse { period: t });
        }
        out.mean.push(m);

        lags.rotate_right(1);
        lags[0].copy_from_slice(yt);
    }
    Ok(out)
}

/// Runs the filter on a simulated dataset, undoing its standardization.
pub fn apf_on_dataset(ds: &SimulatedDataset, opts: &ApfOptions) -> Result<ApfOutput> {
    apf_filter(&ds.spec, &ds.cov, &ds.raw_y(), &ds.presample, opts)
}
