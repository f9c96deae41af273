use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    apply_mask, attention, attention_back, dropout_mask, ffn, ffn_back, layer_norm, layer_norm_back, AttnCache,
    FfnCache, LnCache,
};
use super::params::{CrossEncoder, SelfEncoder, TransformerParams};
use super::{FactorInit, Hyperparams};
use crate::error::{Error, Result};
use crate::mat::{gemm, Mat};

/// One training example: a `p x k` window (oldest lag first), the next
/// observation, and the prior factor path over the window.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub window: Mat,
    pub target: Vec<f64>,
    pub prior: Vec<f64>,
}

pub enum Mode<'a> {
    Infer,
    /// Dropout active, masks drawn from the given generator.
    Train(&'a mut ChaCha8Rng),
}

struct Dropper<'a, 'b> {
    mode: &'b mut Mode<'a>,
    p: f64,
}

impl Dropper<'_, '_> {
    fn mask(&mut self, rows: usize, cols: usize) -> Option<Mat> {
        match self.mode {
            Mode::Train(rng) if self.p > 0.0 => Some(dropout_mask(rows, cols, self.p, *rng)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SelfTrace {
    ln1: LnCache,
    pub attn: AttnCache,
    mask1: Option<Mat>,
    /// After the attention skip.
    pub y2: Mat,
    ln2: LnCache,
    ffn: FfnCache,
    mask2: Option<Mat>,
    pub out: Mat,
}

/// Intermediate stages of a cross-attention encoder. For a State Encoder
/// these are `X_0, X_2, X_3, X_5` in order of computation.
#[derive(Debug, Clone)]
pub struct CrossTrace {
    pub input: Mat,
    /// Normalized queries.
    pub q0: Mat,
    /// Normalized keys/values source.
    pub kv0: Mat,
    ln_q: LnCache,
    ln_kv: LnCache,
    pub attn: AttnCache,
    mask1: Option<Mat>,
    residual: bool,
    /// After attention (and the skip, when present).
    pub x2: Mat,
    /// Normalized input to the feed-forward network.
    pub x3: Mat,
    ln2: LnCache,
    ffn: FfnCache,
    mask2: Option<Mat>,
    pub out: Mat,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub y_emb: Mat,
    pub x_init: Vec<f64>,
    pub x_init_emb: Mat,
    pub initial: SelfTrace,
    pub state: Vec<CrossTrace>,
    /// Estimated factor at each lag of the window.
    pub x_hat: Vec<f64>,
    pub x_hat_emb: Mat,
    pub measurement: Vec<CrossTrace>,
    /// Reconstruction of every token, row-major over (lag, variable).
    pub y_hat: Vec<f64>,
    k: usize,
}

impl ForwardTrace {
    /// Prediction of the observation following the window.
    pub fn y_hat_next(&self) -> &[f64] {
        &self.y_hat[self.y_hat.len() - self.k..]
    }

    /// Per-head scores of the last State Encoder, `p x (p*k)`.
    pub fn state_scores(&self) -> &[Mat] {
        &self.state.last().expect("at least one layer").attn.scores
    }

    /// Per-head scores of the last Measurement Encoder, `(p*k) x p`.
    pub fn measurement_scores(&self) -> &[Mat] {
        &self.measurement.last().expect("at least one layer").attn.scores
    }

    pub fn x_hat_last(&self) -> f64 {
        *self.x_hat.last().expect("non-empty window")
    }
}

fn check(m: &Mat, layer: &str) -> Result<()> {
    if m.is_finite() {
        Ok(())
    } else {
        Err(Error::NumericOverflow { layer: layer.to_string() })
    }
}

/// Initial factor series: per-lag mean over observables, or one column.
pub fn init_factor(window: &Mat, how: FactorInit) -> Vec<f64> {
    (0..window.rows())
        .map(|p| match how {
            FactorInit::Mean => window.row(p).iter().sum::<f64>() / window.cols() as f64,
            FactorInit::Variable(i) => window.get(p, i),
        })
        .collect()
}

/// Token embedding: token `p*k + i` is `y[p][i] * W_embed + s*(pe[p] + ve[i])`.
pub fn embed_window(window: &Mat, params: &TransformerParams, hyper: &Hyperparams) -> Mat {
    let (p, k, d) = (hyper.p, hyper.k, hyper.d_model);
    let s = hyper.enc_scale;
    let w = params.w_embed.as_slice();
    let mut out = Mat::zeros(p * k, d);
    for t in 0..p {
        let pe = params.pe.row(t);
        for i in 0..k {
            let ve = params.ve.row(i);
            let v = window.get(t, i);
            let row = out.row_mut(t * k + i);
            for j in 0..d {
                row[j] = v * w[j] + s * (pe[j] + ve[j]);
            }
        }
    }
    out
}

/// Factor embedding with the factor's own variable encoding (row `k` of `ve`).
pub fn embed_factor(x: &[f64], params: &TransformerParams, hyper: &Hyperparams) -> Mat {
    let d = hyper.d_model;
    let s = hyper.enc_scale;
    let w = params.w_embed.as_slice();
    let ve = params.ve.row(hyper.k);
    let mut out = Mat::zeros(x.len(), d);
    for (t, &v) in x.iter().enumerate() {
        let pe = params.pe.row(t);
        let row = out.row_mut(t);
        for j in 0..d {
            row[j] = v * w[j] + s * (pe[j] + ve[j]);
        }
    }
    out
}

fn self_forward(x: &Mat, e: &SelfEncoder, h: &Hyperparams, drop: &mut Dropper) -> SelfTrace {
    let (y0, ln1) = layer_norm(x, &e.norm1);
    let (mut y1, attn) = attention(&y0, &y0, &e.attn, h.n_head, h.d_k);
    let mask1 = drop.mask(y1.rows(), y1.cols());
    apply_mask(&mut y1, mask1.as_ref());
    let mut y2 = x.clone();
    y2.add_assign(&y1);
    let (y3, ln2) = layer_norm(&y2, &e.norm2);
    let (mut y4, ffn_c) = ffn(&y3, &e.ffn);
    let mask2 = drop.mask(y4.rows(), y4.cols());
    apply_mask(&mut y4, mask2.as_ref());
    let mut out = y2.clone();
    out.add_assign(&y4);
    SelfTrace { ln1, attn, mask1, y2, ln2, ffn: ffn_c, mask2, out }
}

fn self_backward(dout: &Mat, e: &SelfEncoder, t: &SelfTrace, h: &Hyperparams, g: &mut SelfEncoder) -> Mat {
    let mut d4 = dout.clone();
    apply_mask(&mut d4, t.mask2.as_ref());
    let d3 = ffn_back(&d4, &e.ffn, &t.ffn, &mut g.ffn);
    let mut dx2 = layer_norm_back(&d3, &e.norm2, &t.ln2, &mut g.norm2);
    dx2.add_assign(dout);
    let mut d1 = dx2.clone();
    apply_mask(&mut d1, t.mask1.as_ref());
    let (mut dq, dkv) = attention_back(&d1, &e.attn, &t.attn, h.d_k, &mut g.attn);
    dq.add_assign(&dkv);
    let mut dx = layer_norm_back(&dq, &e.norm1, &t.ln1, &mut g.norm1);
    dx.add_assign(&dx2);
    dx
}

fn cross_forward(
    input: &Mat,
    kv_src: &Mat,
    e: &CrossEncoder,
    h: &Hyperparams,
    residual: bool,
    drop: &mut Dropper,
) -> CrossTrace {
    let (q0, ln_q) = layer_norm(input, &e.norm_q);
    let (kv0, ln_kv) = layer_norm(kv_src, &e.norm_kv);
    let (mut x1, attn) = attention(&q0, &kv0, &e.attn, h.n_head, h.d_k);
    let mask1 = drop.mask(x1.rows(), x1.cols());
    apply_mask(&mut x1, mask1.as_ref());
    let x2 = if residual {
        let mut s = input.clone();
        s.add_assign(&x1);
        s
    } else {
        x1
    };
    let (x3, ln2) = layer_norm(&x2, &e.norm2);
    let (mut x4, ffn_c) = ffn(&x3, &e.ffn);
    let mask2 = drop.mask(x4.rows(), x4.cols());
    apply_mask(&mut x4, mask2.as_ref());
    let mut out = x2.clone();
    out.add_assign(&x4);
    CrossTrace {
        input: input.clone(),
        q0,
        kv0,
        ln_q,
        ln_kv,
        attn,
        mask1,
        residual,
        x2,
        x3,
        ln2,
        ffn: ffn_c,
        mask2,
        out,
    }
}

/// Returns (dL/d input, dL/d kv source).
fn cross_backward(dout: &Mat, e: &CrossEncoder, t: &CrossTrace, h: &Hyperparams, g: &mut CrossEncoder) -> (Mat, Mat) {
    let mut d4 = dout.clone();
    apply_mask(&mut d4, t.mask2.as_ref());
    let d3 = ffn_back(&d4, &e.ffn, &t.ffn, &mut g.ffn);
    let mut dx2 = layer_norm_back(&d3, &e.norm2, &t.ln2, &mut g.norm2);
    dx2.add_assign(dout);
    let mut d1 = dx2.clone();
    apply_mask(&mut d1, t.mask1.as_ref());
    let (dq0, dkv0) = attention_back(&d1, &e.attn, &t.attn, h.d_k, &mut g.attn);
    let mut din = layer_norm_back(&dq0, &e.norm_q, &t.ln_q, &mut g.norm_q);
    if t.residual {
        din.add_assign(&dx2);
    }
    let dkv = layer_norm_back(&dkv0, &e.norm_kv, &t.ln_kv, &mut g.norm_kv);
    (din, dkv)
}

/// `m * w` for a one-column `w`, as a vector.
pub fn project_column(m: &Mat, w: &Mat) -> Vec<f64> {
    let mut out = Mat::zeros(m.rows(), 1);
    gemm(1.0, m, false, w, false, 0.0, &mut out);
    out.into_vec()
}

/// Full forward pass over one window.
pub fn forward(window: &Mat, params: &TransformerParams, hyper: &Hyperparams, mut mode: Mode) -> Result<ForwardTrace> {
    if window.shape() != (hyper.p, hyper.k) {
        return Err(Error::Config(format!(
            "window is {}x{}, network expects {}x{}",
            window.rows(),
            window.cols(),
            hyper.p,
            hyper.k
        )));
    }
    let mut drop = Dropper { mode: &mut mode, p: hyper.dropout };
    let y_emb = embed_window(window, params, hyper);
    let x_init = init_factor(window, hyper.factor_init);
    let x_init_emb = embed_factor(&x_init, params, hyper);

    let initial = self_forward(&y_emb, &params.initial, hyper, &mut drop);
    check(&initial.out, "initial_encoder")?;

    let mut state: Vec<CrossTrace> = Vec::with_capacity(hyper.n_layers);
    for e in &params.state {
        let input = state.last().map_or(&x_init_emb, |t| &t.out);
        let t = cross_forward(input, &initial.out, e, hyper, true, &mut drop);
        check(&t.out, "state_encoder")?;
        state.push(t);
    }
    let x_hat = project_column(&state.last().expect("n_layers >= 1").out, &params.w_factor);
    if !x_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericOverflow { layer: "factor_head".into() });
    }
    let x_hat_emb = embed_factor(&x_hat, params, hyper);

    let mut measurement: Vec<CrossTrace> = Vec::with_capacity(hyper.n_layers);
    for e in &params.measurement {
        let input = measurement.last().map_or(&initial.out, |t| &t.out);
        let t = cross_forward(input, &x_hat_emb, e, hyper, false, &mut drop);
        check(&t.out, "measurement_encoder")?;
        measurement.push(t);
    }
    let y_hat = project_column(&measurement.last().expect("n_layers >= 1").out, &params.w_predict);
    if !y_hat.iter().all(|v| v.is_finite()) {
        return Err(Error::NumericOverflow { layer: "prediction_head".into() });
    }
    Ok(ForwardTrace { y_emb, x_init, x_init_emb, initial, state, x_hat, x_hat_emb, measurement, y_hat, k: hyper.k })
}

fn embed_factor_back(d: &Mat, x: &[f64], params: &TransformerParams, hyper: &Hyperparams, g: &mut TransformerParams) -> Vec<f64> {
    let s = hyper.enc_scale;
    let w = params.w_embed.as_slice();
    let k = hyper.k;
    let mut dx = vec![0.0; x.len()];
    for (t, &v) in x.iter().enumerate() {
        let dr = d.row(t);
        dx[t] = dr.iter().zip(w).map(|(a, b)| a * b).sum();
        for (gw, &a) in g.w_embed.as_mut_slice().iter_mut().zip(dr) {
            *gw += v * a;
        }
        for (gp, &a) in g.pe.row_mut(t).iter_mut().zip(dr) {
            *gp += s * a;
        }
        for (gv, &a) in g.ve.row_mut(k).iter_mut().zip(dr) {
            *gv += s * a;
        }
    }
    dx
}

/// Back-propagates dL/dx_hat (length p) and dL/dy_hat (length p*k),
/// accumulating parameter gradients into `g`.
pub fn backward(
    window: &Mat,
    params: &TransformerParams,
    hyper: &Hyperparams,
    trace: &ForwardTrace,
    d_x_hat: &[f64],
    d_y_hat: &[f64],
    g: &mut TransformerParams,
) {
    let (p, k, d) = (hyper.p, hyper.k, hyper.d_model);
    let last_m = trace.measurement.last().expect("n_layers >= 1");
    let dyh = Mat::from_vec(p * k, 1, d_y_hat.to_vec());
    gemm(1.0, &last_m.out, true, &dyh, false, 1.0, &mut g.w_predict);
    let mut dcur = Mat::zeros(p * k, d);
    gemm(1.0, &dyh, false, &params.w_predict, true, 0.0, &mut dcur);

    let mut d_xhat_emb = Mat::zeros(p, d);
    for l in (0..hyper.n_layers).rev() {
        let (din, dkv) = cross_backward(&dcur, &params.measurement[l], &trace.measurement[l], hyper, &mut g.measurement[l]);
        d_xhat_emb.add_assign(&dkv);
        dcur = din;
    }
    let mut d_yinit = dcur;

    let mut dx = embed_factor_back(&d_xhat_emb, &trace.x_hat, params, hyper, g);
    for (a, b) in dx.iter_mut().zip(d_x_hat) {
        *a += b;
    }
    let dxm = Mat::from_vec(p, 1, dx);
    let last_s = trace.state.last().expect("n_layers >= 1");
    gemm(1.0, &last_s.out, true, &dxm, false, 1.0, &mut g.w_factor);
    let mut dcur = Mat::zeros(p, d);
    gemm(1.0, &dxm, false, &params.w_factor, true, 0.0, &mut dcur);
    for l in (0..hyper.n_layers).rev() {
        let (din, dkv) = cross_backward(&dcur, &params.state[l], &trace.state[l], hyper, &mut g.state[l]);
        d_yinit.add_assign(&dkv);
        dcur = din;
    }
    embed_factor_back(&dcur, &trace.x_init, params, hyper, g);

    let d_emb = self_backward(&d_yinit, &params.initial, &trace.initial, hyper, &mut g.initial);
    let s = hyper.enc_scale;
    for t in 0..p {
        for i in 0..k {
            let dr = d_emb.row(t * k + i);
            let v = window.get(t, i);
            for (gw, &a) in g.w_embed.as_mut_slice().iter_mut().zip(dr) {
                *gw += v * a;
            }
            for (gp, &a) in g.pe.row_mut(t).iter_mut().zip(dr) {
                *gp += s * a;
            }
            for (gv, &a) in g.ve.row_mut(i).iter_mut().zip(dr) {
                *gv += s * a;
            }
        }
    }
}

fn l1(a: &[f64], b: &[f64]) -> (f64, Vec<f64>) {
    let n = a.len() as f64;
    let mut s = 0.0;
    let mut d = Vec::with_capacity(a.len());
    for (x, y) in a.iter().zip(b) {
        let r = x - y;
        s += r.abs();
        d.push(if r > 0.0 {
            1.0 / n
        } else if r < 0.0 {
            -1.0 / n
        } else {
            0.0
        });
    }
    (s / n, d)
}

/// Mixed objective `lambda * mean|x_hat - prior| + (1 - lambda) * mean|y_hat - y|`
/// and its derivatives with respect to `x_hat` and `y_hat_next`.
pub fn mixed_loss(x_hat: &[f64], prior: &[f64], y_hat_next: &[f64], target: &[f64], lambda: f64) -> (f64, Vec<f64>, Vec<f64>) {
    let (fe, mut dx) = l1(x_hat, prior);
    let (pe, mut dy) = l1(y_hat_next, target);
    dx.iter_mut().for_each(|v| *v *= lambda);
    dy.iter_mut().for_each(|v| *v *= 1.0 - lambda);
    (lambda * fe + (1.0 - lambda) * pe, dx, dy)
}

/// Mean loss and gradient over a batch. With `dropout_seeds`, each window
/// draws its masks from its own seed; without, inference mode is used.
/// Windows are processed in order so the result does not depend on threading.
pub fn grad(
    params: &TransformerParams,
    hyper: &Hyperparams,
    batch: &[&Example],
    lambda: f64,
    dropout_seeds: Option<&[u64]>,
) -> Result<(f64, TransformerParams)> {
    let mut g = params.zeros_like();
    let mut total = 0.0;
    let n = batch.len().max(1) as f64;
    let pk = hyper.p * hyper.k;
    for (j, ex) in batch.iter().enumerate() {
        let trace = match dropout_seeds {
            Some(seeds) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds[j]);
                forward(&ex.window, params, hyper, Mode::Train(&mut rng))?
            }
            None => forward(&ex.window, params, hyper, Mode::Infer)?,
        };
        let (l, dx, dy_next) = mixed_loss(&trace.x_hat, &ex.prior, trace.y_hat_next(), &ex.target, lambda);
        total += l;
        let mut dy = vec![0.0; pk];
        dy[pk - hyper.k..].copy_from_slice(&dy_next);
        backward(&ex.window, params, hyper, &trace, &dx, &dy, &mut g);
    }
    for t in g.tensors_mut() {
        t.scale(1.0 / n);
    }
    Ok((total / n, g))
}

/// Batch loss only (same masks as [`grad`] for the same seeds).
pub fn batch_loss(
    params: &TransformerParams,
    hyper: &Hyperparams,
    batch: &[&Example],
    lambda: f64,
    dropout_seeds: Option<&[u64]>,
) -> Result<f64> {
    let mut total = 0.0;
    for (j, ex) in batch.iter().enumerate() {
        let trace = match dropout_seeds {
            Some(seeds) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seeds[j]);
                forward(&ex.window, params, hyper, Mode::Train(&mut rng))?
            }
            None => forward(&ex.window, params, hyper, Mode::Infer)?,
        };
        total += mixed_loss(&trace.x_hat, &ex.prior, trace.y_hat_next(), &ex.target, lambda).0;
    }
    Ok(total / batch.len().max(1) as f64)
}
