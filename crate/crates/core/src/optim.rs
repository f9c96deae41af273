//! Deterministic numerical optimizers: BFGS with finite-difference gradients
//! and golden-section search for convex one-dimensional problems.

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    /// Budget on objective evaluations (gradient probes included).
    pub max_evals: usize,
    /// Stop when the objective improves by less than this over one iteration.
    pub f_tol: f64,
    /// Stop when the gradient infinity norm falls below this.
    pub g_tol: f64,
    /// Relative finite-difference step.
    pub fd_step: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_evals: 20_000, f_tol: 1e-8, g_tol: 1e-6, fd_step: 1e-5 }
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub evals: usize,
    pub converged: bool,
    /// Objective value after each accepted iteration, starting with the initial point.
    pub trace: Vec<f64>,
}

struct Counted<'a, F> {
    f: &'a mut F,
    evals: usize,
}

impl<F: FnMut(&[f64]) -> f64> Counted<'_, F> {
    fn eval(&mut self, x: &[f64]) -> f64 {
        self.evals += 1;
        let v = (self.f)(x);
        if v.is_finite() {
            v
        } else {
            f64::INFINITY
        }
    }

    fn gradient(&mut self, x: &[f64], rel_step: f64) -> Vec<f64> {
        let mut probe = x.to_vec();
        let mut g = vec![0.0; x.len()];
        for i in 0..x.len() {
            let h = rel_step * x[i].abs().max(1.0);
            probe[i] = x[i] + h;
            let fp = self.eval(&probe);
            probe[i] = x[i] - h;
            let fm = self.eval(&probe);
            probe[i] = x[i];
            g[i] = if fp.is_finite() && fm.is_finite() { (fp - fm) / (2.0 * h) } else { 0.0 };
        }
        g
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Minimizes `f` from `x0` with BFGS updates of the inverse Hessian and an
/// Armijo backtracking line search. Every accepted step decreases `f`.
pub fn bfgs<F: FnMut(&[f64]) -> f64>(mut f: F, x0: &[f64], opts: &BfgsOptions) -> Minimum {
    let n = x0.len();
    let mut obj = Counted { f: &mut f, evals: 0 };
    let mut x = x0.to_vec();
    let mut fx = obj.eval(&x);
    let mut trace = vec![fx];
    if n == 0 || !fx.is_finite() {
        return Minimum { x, f: fx, evals: obj.evals, converged: false, trace };
    }
    let mut g = obj.gradient(&x, opts.fd_step);
    let mut h_inv = identity(n);
    let mut fresh_hessian = true;
    let mut converged = false;

    while obj.evals < opts.max_evals {
        if g.iter().all(|v| v.abs() < opts.g_tol) {
            converged = true;
            break;
        }
        let mut dir: Vec<f64> = (0..n).map(|i| -dot(&h_inv[i], &g)).collect();
        let mut slope = dot(&dir, &g);
        if !(slope < 0.0) {
            h_inv = identity(n);
            fresh_hessian = true;
            dir = g.iter().map(|v| -v).collect();
            slope = dot(&dir, &g);
        }

        let mut step = 1.0;
        if fresh_hessian {
            // Keep the first steepest-descent step to unit length.
            let norm = dot(&dir, &dir).sqrt();
            if norm > 1.0 {
                step = 1.0 / norm;
            }
        }
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let ft = obj.eval(&trial);
            if ft <= fx + 1e-4 * step * slope {
                accepted = Some((trial, ft));
                break;
            }
            step *= 0.5;
            if obj.evals >= opts.max_evals {
                break;
            }
        }

        let Some((x_new, f_new)) = accepted else {
            if fresh_hessian {
                // No descent even along the gradient: at a minimum up to noise.
                converged = true;
                break;
            }
            h_inv = identity(n);
            fresh_hessian = true;
            continue;
        };

        let g_new = obj.gradient(&x_new, opts.fd_step);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 {
            if fresh_hessian {
                let scale = sy / dot(&y, &y);
                for (i, row) in h_inv.iter_mut().enumerate() {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    row[i] = scale;
                }
            }
            update_inverse_hessian(&mut h_inv, &s, &y, sy);
            fresh_hessian = false;
        }

        let improvement = fx - f_new;
        x = x_new;
        fx = f_new;
        g = g_new;
        trace.push(fx);
        if improvement.abs() < opts.f_tol {
            converged = true;
            break;
        }
    }

    Minimum { x, f: fx, evals: obj.evals, converged, trace }
}

fn identity(n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| {
            let mut r = vec![0.0; n];
            r[i] = 1.0;
            r
        })
        .collect()
}

fn update_inverse_hessian(h: &mut [Vec<f64>], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| dot(&h[i], y)).collect();
    let yhy = dot(y, &hy);
    for i in 0..n {
        for j in 0..n {
            h[i][j] += -rho * (hy[i] * s[j] + s[i] * hy[j]) + (rho * rho * yhy + rho) * s[i] * s[j];
        }
    }
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..500 {
        if (hi - lo).abs() <= tol {
            break;
        }
        if fc <= fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    if fc <= fd {
        c
    } else {
        d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bfgs_solves_rosenbrock() {
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let m = bfgs(rosen, &[-1.2, 1.0], &BfgsOptions { f_tol: 1e-14, ..Default::default() });
        assert!((m.x[0] - 1.0).abs() < 1e-4, "{:?}", m.x);
        assert!((m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn bfgs_trace_is_monotone() {
        let q = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * (v - 0.5).powi(2)).sum();
        let m = bfgs(q, &[3.0, -2.0, 1.0], &BfgsOptions::default());
        assert!(m.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(m.f < 1e-8);
    }

    #[test]
    fn golden_section_on_abs() {
        let x = golden_section(|v| (v - 0.3).abs(), -5.0, 5.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-9);
    }
}
