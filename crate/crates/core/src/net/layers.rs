//! Building blocks with explicit forward caches and backward passes.

use rand::Rng;

use super::params::{Attention, Ffn, LayerNorm};
use crate::mat::{gemm, matmul, Mat};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Mat, n: &LayerNorm) -> (Mat, LnCache) {
    let (r, c) = x.shape();
    let mut xhat = Mat::zeros(r, c);
    let mut out = Mat::zeros(r, c);
    let mut inv_std = Vec::with_capacity(r);
    let g = n.gamma.as_slice();
    let b = n.beta.as_slice();
    for i in 0..r {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let is = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(is);
        let xh = xhat.row_mut(i);
        for j in 0..c {
            xh[j] = (row[j] - mean) * is;
        }
        let o = out.row_mut(i);
        for j in 0..c {
            o[j] = g[j] * xh[j] + b[j];
        }
    }
    (out, LnCache { xhat, inv_std })
}

/// Returns dL/dx; accumulates into `grad`.
pub fn layer_norm_back(dy: &Mat, n: &LayerNorm, cache: &LnCache, grad: &mut LayerNorm) -> Mat {
    let (r, c) = dy.shape();
    let g = n.gamma.as_slice();
    let mut dx = Mat::zeros(r, c);
    let mut dxh = vec![0.0; c];
    for i in 0..r {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        {
            let gg = grad.gamma.as_mut_slice();
            for j in 0..c {
                gg[j] += dyr[j] * xh[j];
            }
            let gb = grad.beta.as_mut_slice();
            for j in 0..c {
                gb[j] += dyr[j];
            }
        }
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..c {
            dxh[j] = dyr[j] * g[j];
            m1 += dxh[j];
            m2 += dxh[j] * xh[j];
        }
        m1 /= c as f64;
        m2 /= c as f64;
        let is = cache.inv_std[i];
        let out = dx.row_mut(i);
        for j in 0..c {
            out[j] = is * (dxh[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

/// Row-wise softmax with max subtraction, in place.
pub fn softmax_rows(m: &mut Mat) {
    for i in 0..m.rows() {
        let row = m.row_mut(i);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            s += *v;
        }
        for v in row.iter_mut() {
            *v /= s;
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    q_src: Mat,
    kv_src: Mat,
    q: Mat,
    k: Mat,
    v: Mat,
    /// Concatenated head outputs before `W^O`.
    o: Mat,
    /// Attention scores per head, `n_q x n_kv`, rows summing to one.
    pub scores: Vec<Mat>,
}

pub fn attention(q_src: &Mat, kv_src: &Mat, a: &Attention, n_head: usize, d_k: usize) -> (Mat, AttnCache) {
    let q = matmul(q_src, &a.wq);
    let k = matmul(kv_src, &a.wk);
    let v = matmul(kv_src, &a.wv);
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut o = Mat::zeros(q_src.rows(), n_head * d_k);
    let mut scores = Vec::with_capacity(n_head);
    for h in 0..n_head {
        let qh = q.col_block(h * d_k, d_k);
        let kh = k.col_block(h * d_k, d_k);
        let vh = v.col_block(h * d_k, d_k);
        let mut s = Mat::zeros(qh.rows(), kh.rows());
        gemm(scale, &qh, false, &kh, true, 0.0, &mut s);
        softmax_rows(&mut s);
        o.set_col_block(h * d_k, &matmul(&s, &vh));
        scores.push(s);
    }
    let out = matmul(&o, &a.wo);
    let cache = AttnCache { q_src: q_src.clone(), kv_src: kv_src.clone(), q, k, v, o, scores };
    (out, cache)
}

/// Returns (dL/dq_src, dL/dkv_src).
pub fn attention_back(dout: &Mat, a: &Attention, c: &AttnCache, d_k: usize, grad: &mut Attention) -> (Mat, Mat) {
    let n_head = c.scores.len();
    gemm(1.0, &c.o, true, dout, false, 1.0, &mut grad.wo);
    let mut do_ = Mat::zeros(dout.rows(), a.wo.rows());
    gemm(1.0, dout, false, &a.wo, true, 0.0, &mut do_);
    let scale = 1.0 / (d_k as f64).sqrt();
    let mut dq = Mat::zeros(c.q.rows(), c.q.cols());
    let mut dk = Mat::zeros(c.k.rows(), c.k.cols());
    let mut dv = Mat::zeros(c.v.rows(), c.v.cols());
    for h in 0..n_head {
        let s = &c.scores[h];
        let doh = do_.col_block(h * d_k, d_k);
        let qh = c.q.col_block(h * d_k, d_k);
        let kh = c.k.col_block(h * d_k, d_k);
        let vh = c.v.col_block(h * d_k, d_k);
        let mut ds = Mat::zeros(s.rows(), s.cols());
        gemm(1.0, &doh, false, &vh, true, 0.0, &mut ds);
        let mut dvh = Mat::zeros(vh.rows(), d_k);
        gemm(1.0, s, true, &doh, false, 0.0, &mut dvh);
        // softmax Jacobian, then the 1/sqrt(d_k) scaling
        for i in 0..s.rows() {
            let sr = s.row(i);
            let dsr = ds.row_mut(i);
            let dot: f64 = sr.iter().zip(dsr.iter()).map(|(a, b)| a * b).sum();
            for j in 0..sr.len() {
                dsr[j] = sr[j] * (dsr[j] - dot) * scale;
            }
        }
        let mut dqh = Mat::zeros(qh.rows(), d_k);
        gemm(1.0, &ds, false, &kh, false, 0.0, &mut dqh);
        let mut dkh = Mat::zeros(kh.rows(), d_k);
        gemm(1.0, &ds, true, &qh, false, 0.0, &mut dkh);
        dq.set_col_block(h * d_k, &dqh);
        dk.set_col_block(h * d_k, &dkh);
        dv.set_col_block(h * d_k, &dvh);
    }
    gemm(1.0, &c.q_src, true, &dq, false, 1.0, &mut grad.wq);
    gemm(1.0, &c.kv_src, true, &dk, false, 1.0, &mut grad.wk);
    gemm(1.0, &c.kv_src, true, &dv, false, 1.0, &mut grad.wv);
    let mut dq_src = Mat::zeros(c.q_src.rows(), c.q_src.cols());
    gemm(1.0, &dq, false, &a.wq, true, 0.0, &mut dq_src);
    let mut dkv_src = Mat::zeros(c.kv_src.rows(), c.kv_src.cols());
    gemm(1.0, &dk, false, &a.wk, true, 0.0, &mut dkv_src);
    gemm(1.0, &dv, false, &a.wv, true, 1.0, &mut dkv_src);
    (dq_src, dkv_src)
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Exact GELU, `x * Phi(x)`.
pub fn gelu(x: f64) -> f64 {
    x * std_normal_cdf(x)
}

pub fn gelu_deriv(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    std_normal_cdf(x) + x * pdf
}

#[derive(Debug, Clone)]
pub struct FfnCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

pub fn ffn(x: &Mat, f: &Ffn) -> (Mat, FfnCache) {
    let mut pre = matmul(x, &f.w1);
    pre.add_row_broadcast(&f.b1);
    let mut act = pre.clone();
    for v in act.as_mut_slice() {
        *v = gelu(*v);
    }
    let mut out = matmul(&act, &f.w2);
    out.add_row_broadcast(&f.b2);
    (out, FfnCache { x: x.clone(), pre, act })
}

pub fn ffn_back(dout: &Mat, f: &Ffn, c: &FfnCache, grad: &mut Ffn) -> Mat {
    gemm(1.0, &c.act, true, dout, false, 1.0, &mut grad.w2);
    dout.accumulate_col_sums(&mut grad.b2);
    let mut dh = Mat::zeros(c.act.rows(), c.act.cols());
    gemm(1.0, dout, false, &f.w2, true, 0.0, &mut dh);
    for (d, p) in dh.as_mut_slice().iter_mut().zip(c.pre.as_slice()) {
        *d *= gelu_deriv(*p);
    }
    gemm(1.0, &c.x, true, &dh, false, 1.0, &mut grad.w1);
    dh.accumulate_col_sums(&mut grad.b1);
    let mut dx = Mat::zeros(c.x.rows(), c.x.cols());
    gemm(1.0, &dh, false, &f.w1, true, 0.0, &mut dx);
    dx
}

/// Inverted dropout mask: entries are 0 or `1/(1-p)`.
pub fn dropout_mask<R: Rng + ?Sized>(rows: usize, cols: usize, p: f64, rng: &mut R) -> Mat {
    let keep = 1.0 / (1.0 - p);
    let data = (0..rows * cols).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    Mat::from_vec(rows, cols, data)
}

pub fn apply_mask(x: &mut Mat, mask: Option<&Mat>) {
    if let Some(m) = mask {
        for (v, w) in x.as_mut_slice().iter_mut().zip(m.as_slice()) {
            *v *= w;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_hand_case() {
        let mut m = Mat::from_rows(&[vec![0.0, (2f64).ln(), 1000.0], vec![1.0, 1.0, 1.0]]);
        softmax_rows(&mut m);
        assert!((m.get(0, 2) - 1.0).abs() < 1e-12);
        assert!(m.get(0, 0) < 1e-300);
        for j in 0..3 {
            assert!((m.get(1, j) - 1.0 / 3.0).abs() < 1e-15);
        }
        let mut m = Mat::from_rows(&[vec![0.0, (2f64).ln()]]);
        softmax_rows(&mut m);
        assert!((m.get(0, 0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.get(0, 1) - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu(0.0), 0.0);
        // Phi(1) = 0.841344746...
        assert!((gelu(1.0) - 0.841_344_746_068_542_9).abs() < 1e-12);
        assert!((gelu(-1.0) + 0.158_655_253_931_457_05).abs() < 1e-12);
        for &x in &[-2.0, -0.3, 0.0, 0.7, 3.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_deriv(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Mat::glorot(5, 16, &mut rng);
        let n = LayerNorm { gamma: Mat::filled(1, 16, 1.0), beta: Mat::zeros(1, 16) };
        let (y, _) = layer_norm(&x, &n);
        for i in 0..5 {
            let r = y.row(i);
            let m: f64 = r.iter().sum::<f64>() / 16.0;
            let v: f64 = r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 16.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn dropout_mask_scales_kept_units() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = dropout_mask(100, 100, 0.2, &mut rng);
        let kept = m.as_slice().iter().filter(|&&v| v > 0.0).count();
        assert!((kept as f64 / 10_000.0 - 0.8).abs() < 0.02);
        assert!(m.as_slice().iter().all(|&v| v == 0.0 || (v - 1.25).abs() < 1e-15));
    }
}
