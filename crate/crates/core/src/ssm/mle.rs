use nalgebra::DMatrix;

use super::{loglik, LinearSsmParams};
use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::optim::{bfgs, BfgsOptions};
use crate::stats;

/// How the measurement covariance is parameterized during estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CovStructure {
    /// Full symmetric `R` through a Cholesky factor with log diagonal.
    Full,
    /// `R = sigma_y^2 I`.
    Shared,
    /// `R` held at its initial value.
    Fixed,
}

#[derive(Debug, Clone)]
pub struct MleOptions {
    pub max_evals: usize,
    /// Convergence tolerance on the log-likelihood change per iteration.
    pub tol: f64,
    pub cov: CovStructure,
    /// Hold `sigma_x` and `mu_x` at their initial values. Both are
    /// unidentified given free loadings and intercepts.
    pub normalize: bool,
    /// Re-run once from a perturbed optimum and keep the better result.
    pub restart: bool,
}

impl Default for MleOptions {
    fn default() -> Self {
        Self { max_evals: 20_000, tol: 1e-8, cov: CovStructure::Full, normalize: true, restart: true }
    }
}

#[derive(Debug, Clone)]
pub struct MleResult {
    pub params: LinearSsmParams,
    pub loglik: f64,
    pub converged: bool,
    pub evals: usize,
    /// Log-likelihood after each accepted iteration of the first search.
    pub trace: Vec<f64>,
}

struct Layout {
    k: usize,
    cov: CovStructure,
    normalize: bool,
    base: LinearSsmParams,
}

fn logit(p: f64) -> f64 {
    let p = p.clamp(1e-9, 1.0 - 1e-9);
    (p / (1.0 - p)).ln()
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Layout {
    fn pack(&self, p: &LinearSsmParams) -> Vec<f64> {
        let mut th = vec![logit(p.alpha)];
        if !self.normalize {
            th.push(p.sigma_x.max(1e-12).ln());
            th.push(p.mu_x);
        }
        th.extend_from_slice(&p.mu_y);
        th.extend_from_slice(&p.beta);
        match self.cov {
            CovStructure::Full => {
                let l = p.r.clone().cholesky().map(|c| c.l()).unwrap_or_else(|| {
                    DMatrix::from_diagonal(&p.r.diagonal().map(|d| d.max(1e-8).sqrt()))
                });
                for i in 0..self.k {
                    for j in 0..=i {
                        th.push(if i == j { l[(i, i)].ln() } else { l[(i, j)] });
                    }
                }
            }
            CovStructure::Shared => {
                let mean_var = p.r.diagonal().mean().max(1e-12);
                th.push(0.5 * mean_var.ln());
            }
            CovStructure::Fixed => {}
        }
        th
    }

    fn unpack(&self, th: &[f64]) -> LinearSsmParams {
        let k = self.k;
        let mut it = th.iter().copied();
        let alpha = logistic(it.next().unwrap());
        let (sigma_x, mu_x) = if self.normalize {
            (self.base.sigma_x, self.base.mu_x)
        } else {
            (it.next().unwrap().exp(), it.next().unwrap())
        };
        let mu_y: Vec<f64> = it.by_ref().take(k).collect();
        let beta: Vec<f64> = it.by_ref().take(k).collect();
        let r = match self.cov {
            CovStructure::Full => {
                let mut l = DMatrix::zeros(k, k);
                for i in 0..k {
                    for j in 0..=i {
                        let v = it.next().unwrap();
                        l[(i, j)] = if i == j { v.exp() } else { v };
                    }
                }
                &l * l.transpose()
            }
            CovStructure::Shared => {
                let s = it.next().unwrap().exp();
                DMatrix::identity(k, k) * (s * s)
            }
            CovStructure::Fixed => self.base.r.clone(),
        };
        LinearSsmParams { mu_x, alpha, sigma_x, mu_y, beta, r }
    }
}

/// Data-driven starting values: loadings from the leading principal
/// component, residual variances on the diagonal of `R`.
pub fn initial_guess(y: &Mat) -> LinearSsmParams {
    let (n, k) = y.shape();
    let alpha: f64 = 0.9;
    let sigma_x: f64 = 1.0;
    let var_x = sigma_x * sigma_x / (1.0 - alpha * alpha);
    let cols: Vec<Vec<f64>> = (0..k).map(|i| y.col(i)).collect();
    let mu_y: Vec<f64> = cols.iter().map(|c| stats::mean(c)).collect();
    let cov = DMatrix::from_fn(k, k, |i, j| stats::covariance(&cols[i], &cols[j]));
    let eig = cov.clone().symmetric_eigen();
    let lead = eig.eigenvalues.imax();
    let lambda = eig.eigenvalues[lead].max(0.0);
    let mut v: Vec<f64> = eig.eigenvectors.column(lead).iter().copied().collect();
    if v.iter().sum::<f64>() < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    let beta: Vec<f64> = v.iter().map(|x| x * (lambda / var_x).sqrt()).collect();
    let r = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            (cov[(i, i)] - beta[i] * beta[i] * var_x).max(0.05 * cov[(i, i)].max(1e-6))
        } else {
            0.0
        }
    });
    let _ = n;
    LinearSsmParams { mu_x: 0.0, alpha, sigma_x, mu_y, beta, r }
}

/// Maximum-likelihood estimation with BFGS over transformed parameters.
pub fn estimate_mle(y: &Mat, init: &LinearSsmParams, opts: &MleOptions) -> Result<MleResult> {
    let n = y.rows();
    if n < 50 {
        return Err(Error::Config(format!("maximum likelihood needs at least 50 observations, got {n}")));
    }
    init.validate()?;
    if init.k() != y.cols() {
        return Err(Error::Config("initial parameters do not match the data width".into()));
    }
    let layout = Layout { k: init.k(), cov: opts.cov, normalize: opts.normalize, base: init.clone() };
    let nf = n as f64;
    let objective = |th: &[f64]| -> f64 {
        let p = layout.unpack(th);
        match loglik(&p, y) {
            Ok(ll) if ll.is_finite() => -ll / nf,
            _ => f64::INFINITY,
        }
    };
    let bopts = BfgsOptions { max_evals: opts.max_evals, f_tol: opts.tol / nf, ..Default::default() };
    let th0 = layout.pack(init);
    let first = bfgs(objective, &th0, &bopts);
    let mut evals = first.evals;
    let trace: Vec<f64> = first.trace.iter().map(|f| -f * nf).collect();
    let mut best = first;
    if opts.restart && evals < opts.max_evals {
        let perturbed: Vec<f64> =
            best.x.iter().enumerate().map(|(i, v)| v + if i % 2 == 0 { 0.05 } else { -0.05 }).collect();
        let budget = BfgsOptions { max_evals: opts.max_evals - evals, ..bopts.clone() };
        let second = bfgs(objective, &perturbed, &budget);
        evals += second.evals;
        if second.f < best.f {
            best = second;
        }
    }
    if !best.f.is_finite() {
        return Err(Error::Degenerate("likelihood is not finite at any visited parameter".into()));
    }
    Ok(MleResult { params: layout.unpack(&best.x), loglik: -best.f * nf, converged: best.converged, evals, trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::{simulate, DgpSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn pack_unpack_round_trip() {
        let p = LinearSsmParams {
            mu_x: 0.0,
            alpha: 0.7,
            sigma_x: 1.0,
            mu_y: vec![0.1, 0.2],
            beta: vec![1.0, -0.5],
            r: DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 2.0]),
        };
        let layout = Layout { k: 2, cov: CovStructure::Full, normalize: true, base: p.clone() };
        let back = layout.unpack(&layout.pack(&p));
        assert!((back.alpha - p.alpha).abs() < 1e-12);
        assert!((&back.r - &p.r).abs().max() < 1e-12);
    }

    #[test]
    fn ar1_reduction_matches_least_squares() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 20_000;
        let mut x = vec![0.0f64; n];
        for t in 1..n {
            let e: f64 = StandardNormal.sample(&mut rng);
            x[t] = 0.6 * x[t - 1] + e;
        }
        let y = Mat::from_vec(n, 1, x.iter().map(|v| 0.5 + 2.0 * v).collect());
        let init = LinearSsmParams {
            mu_x: 0.0,
            alpha: 0.5,
            sigma_x: 1.0,
            mu_y: vec![0.0],
            beta: vec![1.0],
            r: DMatrix::zeros(1, 1),
        };
        let opts = MleOptions { cov: CovStructure::Fixed, ..Default::default() };
        let fit = estimate_mle(&y, &init, &opts).unwrap();
        let ys = y.col(0);
        let (_, slope) = stats::ols_line(&ys[..n - 1], &ys[1..]).unwrap();
        assert!((fit.params.alpha - slope).abs() < 1e-3, "{} vs {slope}", fit.params.alpha);
    }

    #[test]
    fn recovers_persistence_on_process_one() {
        let spec = DgpSpec::preset(1).unwrap();
        let mut total = 0.0;
        for seed in 0..5 {
            let ds = simulate(&spec, seed).unwrap();
            let span = ds.splits.in_sample();
            let y = Mat::from_vec(span.len(), 5, ds.y.as_slice()[span.start * 5..span.end * 5].to_vec());
            let fit = estimate_mle(&y, &initial_guess(&y), &MleOptions::default()).unwrap();
            total += fit.params.alpha;
        }
        let mean = total / 5.0;
        assert!((mean - 0.96).abs() < 0.05, "mean alpha {mean}");
    }

    #[test]
    fn likelihood_ascends_from_truth_and_is_deterministic() {
        let spec = DgpSpec::preset(1).unwrap();
        let ds = simulate(&spec, 7).unwrap();
        let y = Mat::from_vec(800, 5, ds.y.as_slice()[..800 * 5].to_vec());
        let truth = super::super::kalman_max(&spec).unwrap().standardized(&ds.y_mean, &ds.y_sd);
        let a = estimate_mle(&y, &truth, &MleOptions::default()).unwrap();
        assert!(a.trace.windows(2).all(|w| w[1] >= w[0]));
        assert!(a.loglik >= loglik(&truth, &y).unwrap());
        let b = estimate_mle(&y, &truth, &MleOptions::default()).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn truth_beats_perturbed_persistence() {
        let mut spec = DgpSpec::preset(1).unwrap();
        spec.n = 5000;
        let ds = simulate(&spec, 1).unwrap();
        let truth = super::super::kalman_max(&spec).unwrap().standardized(&ds.y_mean, &ds.y_sd);
        let ll = loglik(&truth, &ds.y).unwrap();
        for d in [-0.2, 0.2] {
            let p = LinearSsmParams { alpha: (truth.alpha + d).min(1.0), ..truth.clone() };
            assert!(ll >= loglik(&p, &ds.y).unwrap());
        }
    }

    #[test]
    fn shared_variance_structure() {
        let spec = DgpSpec::preset(1).unwrap();
        let ds = simulate(&spec, 2).unwrap();
        let y = Mat::from_vec(800, 5, ds.y.as_slice()[..800 * 5].to_vec());
        let opts = MleOptions { cov: CovStructure::Shared, ..Default::default() };
        let fit = estimate_mle(&y, &initial_guess(&y), &opts).unwrap();
        let d = fit.params.r.diagonal();
        assert!(d.iter().all(|v| (v - d[0]).abs() < 1e-12));
        assert!(fit.params.r[(0, 1)] == 0.0);
    }

    #[test]
    fn short_samples_are_rejected() {
        let y = Mat::zeros(10, 1);
        let init = initial_guess(&Mat::from_vec(3, 1, vec![0.0, 1.0, 2.0]));
        assert!(matches!(estimate_mle(&y, &init, &MleOptions::default()), Err(Error::Config(_))));
    }
}
