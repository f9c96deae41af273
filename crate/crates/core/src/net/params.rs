use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Hyperparams;
use crate::error::{Error, Result};
use crate::mat::Mat;

/// How the optimizer treats a tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    /// Weight matrix, subject to weight decay.
    Weight,
    /// Normalization scale/shift or bias: trained without decay.
    NoDecay,
    /// Learned encoding vectors: trained without decay.
    Encoding,
    /// Not trained (sinusoidal positional encodings).
    Frozen,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Mat,
    pub beta: Mat,
}

impl LayerNorm {
    fn new(d: usize) -> Self {
        Self { gamma: Mat::filled(1, d, 1.0), beta: Mat::zeros(1, d) }
    }
}

/// Multi-head attention without biases. Head `h` uses the column block
/// `h*d_k .. (h+1)*d_k` of `wq`, `wk`, `wv`.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
}

impl Attention {
    fn new<R: Rng>(h: &Hyperparams, rng: &mut R) -> Self {
        let per_head = |rng: &mut R| {
            let mut w = Mat::zeros(h.d_model, h.d_attn());
            for i in 0..h.n_head {
                w.set_col_block(i * h.d_k, &Mat::glorot(h.d_model, h.d_k, rng));
            }
            w
        };
        Self { wq: per_head(rng), wk: per_head(rng), wv: per_head(rng), wo: Mat::glorot(h.d_attn(), h.d_model, rng) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ffn {
    pub w1: Mat,
    pub b1: Mat,
    pub w2: Mat,
    pub b2: Mat,
}

impl Ffn {
    fn new<R: Rng>(h: &Hyperparams, rng: &mut R) -> Self {
        Self {
            w1: Mat::glorot(h.d_model, h.d_ff, rng),
            b1: Mat::zeros(1, h.d_ff),
            w2: Mat::glorot(h.d_ff, h.d_model, rng),
            b2: Mat::zeros(1, h.d_model),
        }
    }
}

/// Self-attention encoder (pre-norm, two residual skips).
#[derive(Debug, Clone, PartialEq)]
pub struct SelfEncoder {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

/// Cross-attention encoder: queries from one stream, keys/values from another,
/// each normalized separately.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossEncoder {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub ffn: Ffn,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    /// Shared 1 x d_model value embedding for observables and the factor.
    pub w_embed: Mat,
    /// Positional encodings, one row per lag.
    pub pe: Mat,
    /// Variable encodings: rows `0..k` for observables, row `k` for the factor.
    pub ve: Mat,
    pub initial: SelfEncoder,
    pub state: Vec<CrossEncoder>,
    pub measurement: Vec<CrossEncoder>,
    pub w_factor: Mat,
    pub w_predict: Mat,
}

/// Sinusoidal table with lags numbered from 1.
pub fn sinusoidal_table(p: usize, d: usize) -> Mat {
    let mut m = Mat::zeros(p, d);
    for t in 0..p {
        for i in 0..d / 2 {
            let angle = (t + 1) as f64 / 10_000f64.powf(2.0 * i as f64 / d as f64);
            m.set(t, 2 * i, angle.sin());
            m.set(t, 2 * i + 1, angle.cos());
        }
    }
    m
}

impl TransformerParams {
    /// Glorot-uniform weights, unit norm scales, zero shifts and biases.
    pub fn init(h: &Hyperparams, seed: u64) -> Result<Self> {
        h.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = h.d_model;
        let w_embed = Mat::glorot(1, d, &mut rng);
        let pe = if h.sinusoidal { sinusoidal_table(h.p, d) } else { Mat::glorot(h.p, d, &mut rng) };
        let ve = Mat::glorot(h.k + 1, d, &mut rng);
        let initial = SelfEncoder {
            norm1: LayerNorm::new(d),
            attn: Attention::new(h, &mut rng),
            norm2: LayerNorm::new(d),
            ffn: Ffn::new(h, &mut rng),
        };
        let cross = |rng: &mut ChaCha8Rng| CrossEncoder {
            norm_q: LayerNorm::new(d),
            norm_kv: LayerNorm::new(d),
            attn: Attention::new(h, rng),
            norm2: LayerNorm::new(d),
            ffn: Ffn::new(h, rng),
        };
        let state = (0..h.n_layers).map(|_| cross(&mut rng)).collect();
        let measurement = (0..h.n_layers).map(|_| cross(&mut rng)).collect();
        let w_factor = Mat::glorot(d, 1, &mut rng);
        let w_predict = Mat::glorot(d, 1, &mut rng);
        Ok(Self { w_embed, pe, ve, initial, state, measurement, w_factor, w_predict })
    }

    /// Same shapes, all zeros (used for gradients and optimizer moments).
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// All tensors with names and kinds, in a fixed order.
    pub fn named(&self, sinusoidal: bool) -> Vec<(String, TensorKind, &Mat)> {
        let mut out = Vec::new();
        let pe_kind = if sinusoidal { TensorKind::Frozen } else { TensorKind::Encoding };
        out.push(("w_embed".into(), TensorKind::Weight, &self.w_embed));
        out.push(("pe".into(), pe_kind, &self.pe));
        out.push(("ve".into(), TensorKind::Encoding, &self.ve));
        push_self(&mut out, "initial", &self.initial);
        for (i, e) in self.state.iter().enumerate() {
            push_cross(&mut out, &format!("state{i}"), e);
        }
        for (i, e) in self.measurement.iter().enumerate() {
            push_cross(&mut out, &format!("measurement{i}"), e);
        }
        out.push(("w_factor".into(), TensorKind::Weight, &self.w_factor));
        out.push(("w_predict".into(), TensorKind::Weight, &self.w_predict));
        out
    }

    /// Mutable tensors in the same order as [`TransformerParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        let mut out: Vec<&mut Mat> = vec![&mut self.w_embed, &mut self.pe, &mut self.ve];
        let e = &mut self.initial;
        out.extend([&mut e.norm1.gamma, &mut e.norm1.beta]);
        attn_mut(&mut out, &mut e.attn);
        out.extend([&mut e.norm2.gamma, &mut e.norm2.beta]);
        ffn_mut(&mut out, &mut e.ffn);
        for e in self.state.iter_mut().chain(self.measurement.iter_mut()) {
            out.extend([&mut e.norm_q.gamma, &mut e.norm_q.beta, &mut e.norm_kv.gamma, &mut e.norm_kv.beta]);
            attn_mut(&mut out, &mut e.attn);
            out.extend([&mut e.norm2.gamma, &mut e.norm2.beta]);
            ffn_mut(&mut out, &mut e.ffn);
        }
        out.push(&mut self.w_factor);
        out.push(&mut self.w_predict);
        out
    }

    pub fn tensors(&self) -> Vec<&Mat> {
        self.named(false).into_iter().map(|(_, _, m)| m).collect()
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Flattened copy of every value, in tensor order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|m| m.as_slice().iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(off, flat.len(), "flat parameter vector length mismatch");
    }

    pub fn add_scaled(&mut self, alpha: f64, other: &TransformerParams) {
        let src = other.tensors();
        for (t, s) in self.tensors_mut().into_iter().zip(src) {
            t.scaled_add(alpha, s);
        }
    }
}

fn push_norm<'a>(out: &mut Vec<(String, TensorKind, &'a Mat)>, p: &str, n: &'a LayerNorm) {
    out.push((format!("{p}.gamma"), TensorKind::NoDecay, &n.gamma));
    out.push((format!("{p}.beta"), TensorKind::NoDecay, &n.beta));
}

fn push_attn<'a>(out: &mut Vec<(String, TensorKind, &'a Mat)>, p: &str, a: &'a Attention) {
    out.push((format!("{p}.attn.wq"), TensorKind::Weight, &a.wq));
    out.push((format!("{p}.attn.wk"), TensorKind::Weight, &a.wk));
    out.push((format!("{p}.attn.wv"), TensorKind::Weight, &a.wv));
    out.push((format!("{p}.attn.wo"), TensorKind::Weight, &a.wo));
}

fn push_ffn<'a>(out: &mut Vec<(String, TensorKind, &'a Mat)>, p: &str, f: &'a Ffn) {
    out.push((format!("{p}.ffn.w1"), TensorKind::Weight, &f.w1));
    out.push((format!("{p}.ffn.b1"), TensorKind::NoDecay, &f.b1));
    out.push((format!("{p}.ffn.w2"), TensorKind::Weight, &f.w2));
    out.push((format!("{p}.ffn.b2"), TensorKind::NoDecay, &f.b2));
}

fn push_self<'a>(out: &mut Vec<(String, TensorKind, &'a Mat)>, p: &str, e: &'a SelfEncoder) {
    push_norm(out, &format!("{p}.norm1"), &e.norm1);
    push_attn(out, p, &e.attn);
    push_norm(out, &format!("{p}.norm2"), &e.norm2);
    push_ffn(out, p, &e.ffn);
}

fn push_cross<'a>(out: &mut Vec<(String, TensorKind, &'a Mat)>, p: &str, e: &'a CrossEncoder) {
    push_norm(out, &format!("{p}.norm_q"), &e.norm_q);
    push_norm(out, &format!("{p}.norm_kv"), &e.norm_kv);
    push_attn(out, p, &e.attn);
    push_norm(out, &format!("{p}.norm2"), &e.norm2);
    push_ffn(out, p, &e.ffn);
}

fn attn_mut<'a>(out: &mut Vec<&'a mut Mat>, a: &'a mut Attention) {
    out.extend([&mut a.wq, &mut a.wk, &mut a.wv, &mut a.wo]);
}

fn ffn_mut<'a>(out: &mut Vec<&'a mut Mat>, f: &'a mut Ffn) {
    out.extend([&mut f.w1, &mut f.b1, &mut f.w2, &mut f.b2]);
}

const CHECKPOINT_TAG: &str = "factorformer-checkpoint 1";

/// Text checkpoint: a version tag, the hyperparameters as JSON, a shape
/// manifest, then one line of row-major values per tensor.
pub fn save_checkpoint(path: &Path, hyper: &Hyperparams, params: &TransformerParams) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_TAG}");
    let _ = writeln!(s, "hyper {}", serde_json::to_string(hyper)?);
    let named = params.named(hyper.sinusoidal);
    let _ = writeln!(s, "tensors {}", named.len());
    for (name, _, m) in &named {
        let _ = writeln!(s, "{name} {} {}", m.rows(), m.cols());
    }
    for (_, _, m) in &named {
        let line: Vec<String> = m.as_slice().iter().map(|v| v.to_string()).collect();
        let _ = writeln!(s, "{}", line.join(" "));
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, s)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Hyperparams, TransformerParams)> {
    let text = fs::read_to_string(path)?;
    let perr = |d: String| Error::Parse { path: path.to_path_buf(), detail: d };
    let mut lines = text.lines();
    if lines.next() != Some(CHECKPOINT_TAG) {
        return Err(perr("missing or unsupported version tag".into()));
    }
    let hyper_line = lines.next().and_then(|l| l.strip_prefix("hyper ")).ok_or_else(|| perr("missing hyperparameters".into()))?;
    let hyper: Hyperparams = serde_json::from_str(hyper_line).map_err(|e| perr(e.to_string()))?;
    let count: usize = lines
        .next()
        .and_then(|l| l.strip_prefix("tensors "))
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| perr("missing tensor count".into()))?;
    let mut params = TransformerParams::init(&hyper, 0)?;
    let expected: Vec<(String, usize, usize)> =
        params.named(hyper.sinusoidal).iter().map(|(n, _, m)| (n.clone(), m.rows(), m.cols())).collect();
    if count != expected.len() {
        return Err(perr(format!("expected {} tensors, found {count}", expected.len())));
    }
    for (name, r, c) in &expected {
        let line = lines.next().ok_or_else(|| perr("truncated manifest".into()))?;
        let want = format!("{name} {r} {c}");
        if line != want {
            return Err(perr(format!("shape manifest mismatch: `{line}` vs `{want}`")));
        }
    }
    for (t, (name, _, _)) in params.tensors_mut().into_iter().zip(&expected) {
        let line = lines.next().ok_or_else(|| perr(format!("missing values for {name}")))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|v| v.parse::<f64>().map_err(|_| perr(format!("bad value in {name}"))))
            .collect::<Result<_>>()?;
        if vals.len() != t.len() {
            return Err(perr(format!("{name}: expected {} values, found {}", t.len(), vals.len())));
        }
        t.as_mut_slice().copy_from_slice(&vals);
    }
    Ok((hyper, params))
}
