use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use super::LinearSsmParams;
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutput {
    pub filtered_mean: Vec<f64>,
    pub filtered_var: Vec<f64>,
    pub loglik: f64,
}

/// Kalman filter for the one-factor model. The first period's prior is the
/// stationary distribution of the state.
///
/// When `R` is positive definite the innovation covariance `F = P b b' + R`
/// is handled through its rank-one structure; otherwise `F` is factored
/// directly each period.
pub fn kalman_filter(params: &LinearSsmParams, y: &Mat) -> Result<FilterOutput> {
    params.validate()?;
    let k = params.k();
    if y.cols() != k {
        return Err(Error::Config(format!("observations have {} columns, model has {k}", y.cols())));
    }
    if !y.is_finite() {
        return Err(Error::Config("observations must be finite".into()));
    }
    match params.r.clone().cholesky() {
        Some(ch) => Ok(filter_rank_one(params, y, &ch.l())),
        None => filter_general(params, y),
    }
}

pub fn loglik(params: &LinearSsmParams, y: &Mat) -> Result<f64> {
    kalman_filter(params, y).map(|o| o.loglik)
}

fn forward_solve(l: &DMatrix<f64>, b: &[f64], out: &mut [f64]) {
    for i in 0..b.len() {
        let mut s = b[i];
        for j in 0..i {
            s -= l[(i, j)] * out[j];
        }
        out[i] = s / l[(i, i)];
    }
}

fn filter_rank_one(p: &LinearSsmParams, y: &Mat, l: &DMatrix<f64>) -> FilterOutput {
    let k = p.k();
    let n = y.rows();
    let log_det_r = 2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>();
    // whitened loading L^{-1} b
    let mut wb = vec![0.0; k];
    forward_solve(l, &p.beta, &mut wb);
    let q: f64 = wb.iter().map(|v| v * v).sum();
    let (mut a, mut pv) = p.unconditional();
    let s2 = p.sigma_x * p.sigma_x;
    let c = -0.5 * k as f64 * (2.0 * PI).ln();
    let mut v = vec![0.0; k];
    let mut wv = vec![0.0; k];
    let mut out = FilterOutput { filtered_mean: Vec::with_capacity(n), filtered_var: Vec::with_capacity(n), loglik: 0.0 };
    for t in 0..n {
        let row = y.row(t);
        for i in 0..k {
            v[i] = row[i] - p.mu_y[i] - p.beta[i] * a;
        }
        forward_solve(l, &v, &mut wv);
        let vv: f64 = wv.iter().map(|x| x * x).sum();
        let bv: f64 = wb.iter().zip(&wv).map(|(x, y)| x * y).sum();
        let denom = 1.0 + pv * q;
        let quad = vv - pv * bv * bv / denom;
        out.loglik += c - 0.5 * (log_det_r + denom.ln()) - 0.5 * quad;
        let m = a + pv * bv / denom;
        let pf = pv / denom;
        out.filtered_mean.push(m);
        out.filtered_var.push(pf);
        a = p.mu_x + p.alpha * m;
        pv = p.alpha * p.alpha * pf + s2;
    }
    out
}

fn filter_general(p: &LinearSsmParams, y: &Mat) -> Result<FilterOutput> {
    let k = p.k();
    let n = y.rows();
    let beta = DVector::from_column_slice(&p.beta);
    let bb = &beta * beta.transpose();
    let (mut a, mut pv) = p.unconditional();
    let s2 = p.sigma_x * p.sigma_x;
    let c = -0.5 * k as f64 * (2.0 * PI).ln();
    let mut out = FilterOutput { filtered_mean: Vec::with_capacity(n), filtered_var: Vec::with_capacity(n), loglik: 0.0 };
    for t in 0..n {
        let row = y.row(t);
        let v = DVector::from_fn(k, |i, _| row[i] - p.mu_y[i] - p.beta[i] * a);
        let f = &bb * pv + &p.r;
        let ch = f.cholesky().ok_or(Error::FilterDegenerate { period: t })?;
        let log_det = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let fv = ch.solve(&v);
        let fb = ch.solve(&beta);
        out.loglik += c - 0.5 * log_det - 0.5 * v.dot(&fv);
        let m = a + pv * beta.dot(&fv);
        let pf = (pv - pv * pv * beta.dot(&fb)).max(0.0);
        out.filtered_mean.push(m);
        out.filtered_var.push(pf);
        a = p.mu_x + p.alpha * m;
        pv = p.alpha * p.alpha * pf + s2;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Log density of the stacked observation vector under the joint Gaussian
    /// implied by the model, built without any recursion.
    fn brute_force_loglik(p: &LinearSsmParams, y: &Mat) -> f64 {
        let (n, k) = y.shape();
        let (m0, p0) = p.unconditional();
        let mut mean_x = vec![m0; n];
        let mut cov_x = DMatrix::<f64>::zeros(n, n);
        for t in 1..n {
            mean_x[t] = p.mu_x + p.alpha * mean_x[t - 1];
        }
        let mut var = vec![p0; n];
        for t in 1..n {
            var[t] = p.alpha * p.alpha * var[t - 1] + p.sigma_x * p.sigma_x;
        }
        for s in 0..n {
            for t in s..n {
                let c = p.alpha.powi((t - s) as i32) * var[s];
                cov_x[(s, t)] = c;
                cov_x[(t, s)] = c;
            }
        }
        let dim = n * k;
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        let mut dev = DVector::<f64>::zeros(dim);
        for s in 0..n {
            for i in 0..k {
                dev[s * k + i] = y.get(s, i) - p.mu_y[i] - p.beta[i] * mean_x[s];
                for t in 0..n {
                    for j in 0..k {
                        let mut c = p.beta[i] * p.beta[j] * cov_x[(s, t)];
                        if s == t {
                            c += p.r[(i, j)];
                        }
                        cov[(s * k + i, t * k + j)] = c;
                    }
                }
            }
        }
        let ch = cov.cholesky().unwrap();
        let log_det = 2.0 * ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let quad = dev.dot(&ch.solve(&dev));
        -0.5 * dim as f64 * (2.0 * PI).ln() - 0.5 * log_det - 0.5 * quad
    }

    fn random_params(k: usize, rng: &mut ChaCha8Rng) -> LinearSsmParams {
        let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-0.5..0.5));
        let r = &a * a.transpose() + DMatrix::identity(k, k) * 0.2;
        LinearSsmParams {
            mu_x: rng.random_range(-0.5..0.5),
            alpha: rng.random_range(0.0..0.95),
            sigma_x: rng.random_range(0.3..1.5),
            mu_y: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            beta: (0..k).map(|_| rng.random_range(0.3..1.7)).collect(),
            r,
        }
    }

    #[test]
    fn matches_joint_gaussian_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 1 + trial % 6;
            let k = 1 + trial % 3;
            let p = random_params(k, &mut rng);
            let y = Mat::from_vec(n, k, (0..n * k).map(|_| rng.random_range(-2.0..2.0)).collect());
            let fast = loglik(&p, &y).unwrap();
            let oracle = brute_force_loglik(&p, &y);
            assert!((fast - oracle).abs() < 1e-8, "trial {trial}: {fast} vs {oracle}");
            let general = filter_general(&p, &y).unwrap().loglik;
            assert!((general - oracle).abs() < 1e-8);
        }
    }

    #[test]
    fn hand_recursion_three_periods() {
        let p = LinearSsmParams {
            mu_x: 0.0,
            alpha: 0.5,
            sigma_x: 1.0,
            mu_y: vec![0.0],
            beta: vec![1.0],
            r: DMatrix::from_element(1, 1, 1.0),
        };
        let y = Mat::from_vec(3, 1, vec![1.0, 0.0, -1.0]);
        let out = kalman_filter(&p, &y).unwrap();
        // Recursion written out by hand with a0 = 0, P0 = 1 / (1 - 0.25).
        let mut a = 0.0f64;
        let mut pp: f64 = 1.0 / 0.75;
        let mut ll = 0.0;
        let mut means = vec![];
        for &obs in &[1.0f64, 0.0, -1.0] {
            let f = pp + 1.0;
            let v = obs - a;
            ll += -0.5 * ((2.0 * PI).ln() + f.ln() + v * v / f);
            let m = a + pp / f * v;
            let pf = pp - pp * pp / f;
            means.push(m);
            a = 0.5 * m;
            pp = 0.25 * pf + 1.0;
        }
        for (x, y) in out.filtered_mean.iter().zip(&means) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((out.loglik - ll).abs() < 1e-12);
    }

    #[test]
    fn exact_observation_recovers_data() {
        let p = LinearSsmParams {
            mu_x: 0.0,
            alpha: 0.8,
            sigma_x: 1.0,
            mu_y: vec![0.0],
            beta: vec![1.0],
            r: DMatrix::from_element(1, 1, 0.0),
        };
        let y = Mat::from_vec(4, 1, vec![0.3, -1.2, 2.0, 0.1]);
        let out = kalman_filter(&p, &y).unwrap();
        for (m, v) in out.filtered_mean.iter().zip(y.as_slice()) {
            assert!((m - v).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_state_stays_at_zero() {
        let p = LinearSsmParams {
            mu_x: 0.0,
            alpha: 0.9,
            sigma_x: 0.0,
            mu_y: vec![0.0, 0.0],
            beta: vec![1.0, 1.0],
            r: DMatrix::identity(2, 2),
        };
        let y = Mat::from_vec(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, 3.0]);
        let out = kalman_filter(&p, &y).unwrap();
        assert!(out.filtered_mean.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn singular_innovation_is_reported() {
        let p = LinearSsmParams {
            mu_x: 0.0,
            alpha: 0.5,
            sigma_x: 0.0,
            mu_y: vec![0.0, 0.0],
            beta: vec![1.0, 1.0],
            r: DMatrix::zeros(2, 2),
        };
        let y = Mat::from_vec(2, 2, vec![1.0, 1.0, 0.0, 0.0]);
        assert!(matches!(kalman_filter(&p, &y), Err(Error::FilterDegenerate { period: 0 })));
    }

    #[test]
    fn scale_change_shifts_loglik_by_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_params(3, &mut rng);
        let n = 30;
        let y = Mat::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-2.0..2.0)).collect());
        let c: f64 = 2.5;
        let mut ys = y.clone();
        ys.scale(c);
        let ps = LinearSsmParams {
            mu_y: p.mu_y.iter().map(|v| v * c).collect(),
            beta: p.beta.iter().map(|v| v * c).collect(),
            r: &p.r * (c * c),
            ..p.clone()
        };
        let a = kalman_filter(&p, &y).unwrap();
        let b = kalman_filter(&ps, &ys).unwrap();
        let jac = -(n as f64) * 3.0 * c.ln();
        assert!((b.loglik - a.loglik - jac).abs() < 1e-9);
        for (x, z) in a.filtered_mean.iter().zip(&b.filtered_mean) {
            assert!((x - z).abs() < 1e-10);
        }
    }

    #[test]
    fn variance_converges_to_steady_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = random_params(2, &mut rng);
        let y = Mat::zeros(200, 2);
        let out = kalman_filter(&p, &y).unwrap();
        assert!(out.filtered_var.iter().all(|v| *v > 0.0));
        let tail = &out.filtered_var[190..];
        assert!(tail.windows(2).all(|w| (w[0] - w[1]).abs() < 1e-12));
    }
}
