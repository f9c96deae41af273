//! Attention matrices, contribution series, residual-stream probes and
//! recursive projections of a trained network.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::net::{self, ForwardTrace, Hyperparams, Mode, TransformerParams};

fn head_average(scores: &[Mat]) -> Mat {
    let mut avg = Mat::zeros(scores[0].rows(), scores[0].cols());
    for s in scores {
        avg.add_assign(s);
    }
    avg.scale(1.0 / scores.len() as f64);
    avg
}

/// Last query row of the head-averaged state scores, reshaped to `P x k`
/// in token order (entry `(p, i)` is lag row `p`, variable `i`).
pub fn state_attention_matrix(trace: &ForwardTrace, hyper: &Hyperparams) -> Mat {
    let avg = head_average(trace.state_scores());
    let last = avg.row(avg.rows() - 1);
    Mat::from_vec(hyper.p, hyper.k, last.to_vec())
}

/// Last `k` rows of the head-averaged measurement scores, transposed to
/// `P x k`. Column `i` is the attention behind the prediction of variable `i`.
pub fn measurement_attention_matrix(trace: &ForwardTrace, hyper: &Hyperparams) -> Mat {
    let avg = head_average(trace.measurement_scores());
    let first = avg.rows() - hyper.k;
    let mut out = Mat::zeros(hyper.p, hyper.k);
    for i in 0..hyper.k {
        for p in 0..hyper.p {
            out.set(p, i, avg.get(first + i, p));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub t: usize,
    pub state_matrix: Mat,
    pub measurement_matrix: Mat,
    /// Column sums of the state matrix.
    pub variable_contrib: Vec<f64>,
    /// Row sums of the state matrix.
    pub lag_contrib_state: Vec<f64>,
    /// Row means of the measurement matrix (averaged over predicted variables).
    pub lag_contrib_measure: Vec<f64>,
}

impl AttentionRecord {
    pub fn from_trace(t: usize, trace: &ForwardTrace, hyper: &Hyperparams) -> Self {
        let s = state_attention_matrix(trace, hyper);
        let m = measurement_attention_matrix(trace, hyper);
        let variable_contrib = (0..hyper.k).map(|i| s.col(i).iter().sum()).collect();
        let lag_contrib_state = (0..hyper.p).map(|p| s.row(p).iter().sum()).collect();
        let lag_contrib_measure = (0..hyper.p).map(|p| m.row(p).iter().sum::<f64>() / hyper.k as f64).collect();
        Self { t, state_matrix: s, measurement_matrix: m, variable_contrib, lag_contrib_state, lag_contrib_measure }
    }
}

/// Window ending at period `end`.
pub fn window_at(series: &Mat, p: usize, end: usize) -> Result<Mat> {
    if end + 1 < p || end >= series.rows() {
        return Err(Error::Config(format!("no full {p}-period window ends at period {end}")));
    }
    let mut w = Mat::zeros(p, series.cols());
    for r in 0..p {
        w.row_mut(r).copy_from_slice(series.row(end + 1 - p + r));
    }
    Ok(w)
}

/// Attention records for every period in `span` (inference mode).
pub fn attention_records(
    params: &TransformerParams,
    hyper: &Hyperparams,
    series: &Mat,
    span: std::ops::Range<usize>,
) -> Result<Vec<AttentionRecord>> {
    span.map(|t| {
        let w = window_at(series, hyper.p, t)?;
        let trace = net::forward(&w, params, hyper, Mode::Infer)?;
        Ok(AttentionRecord::from_trace(t, &trace, hyper))
    })
    .collect()
}

/// Stacked contributions: variables `T x k`, state lags `T x P`,
/// measurement lags `T x P`.
pub fn contribution_series(records: &[AttentionRecord]) -> (Mat, Mat, Mat) {
    let stack = |f: &dyn Fn(&AttentionRecord) -> &Vec<f64>| {
        let rows: Vec<Vec<f64>> = records.iter().map(|r| f(r).clone()).collect();
        if rows.is_empty() {
            Mat::zeros(0, 0)
        } else {
            Mat::from_rows(&rows)
        }
    };
    (stack(&|r| &r.variable_contrib), stack(&|r| &r.lag_contrib_state), stack(&|r| &r.lag_contrib_measure))
}

fn smooth_one_way(a: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len());
    let mut b = match a.first() {
        Some(v) => *v,
        None => return out,
    };
    out.push(b);
    for &v in &a[1..] {
        b = alpha * v + (1.0 - alpha) * b;
        out.push(b);
    }
    out
}

/// Exponential smoother `b_t = alpha a_t + (1 - alpha) b_{t-1}`, `b_0 = a_0`.
/// With `two_way`, the forward and backward passes are averaged.
pub fn smooth(series: &[f64], alpha: f64, two_way: bool) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Config(format!("smoothing weight must lie in (0, 1], got {alpha}")));
    }
    let fwd = smooth_one_way(series, alpha);
    if !two_way {
        return Ok(fwd);
    }
    let rev: Vec<f64> = series.iter().rev().copied().collect();
    let mut bwd = smooth_one_way(&rev, alpha);
    bwd.reverse();
    Ok(fwd.iter().zip(&bwd).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Factor read-outs of the last State Encoder's residual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualStream {
    /// Encoder input (the embedded initial factor for a single layer).
    pub embed: Vec<f64>,
    pub norm1: Vec<f64>,
    /// After the attention skip.
    pub attn: Vec<f64>,
    pub norm2: Vec<f64>,
    /// Encoder output; identical to `x_hat`.
    pub ffn: Vec<f64>,
}

impl ResidualStream {
    pub const LABELS: [&'static str; 5] = ["Embed", "Norm1", "Attn", "Norm2", "FFN"];

    pub fn stages(&self) -> [&Vec<f64>; 5] {
        [&self.embed, &self.norm1, &self.attn, &self.norm2, &self.ffn]
    }
}

/// Projects each stored stage through the factor output weights.
pub fn residual_probe(trace: &ForwardTrace, params: &TransformerParams) -> ResidualStream {
    let s = trace.state.last().expect("at least one layer");
    let w = &params.w_factor;
    ResidualStream {
        embed: net::project_column(&s.input, w),
        norm1: net::project_column(&s.q0, w),
        attn: net::project_column(&s.x2, w),
        norm2: net::project_column(&s.x3, w),
        ffn: net::project_column(&s.out, w),
    }
}

/// Recursive projection from the window ending at `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tentacle {
    pub t0: usize,
    /// Factor estimate `j + 1` steps ahead.
    pub x: Vec<f64>,
    /// Predicted observables, `n x k`.
    pub y: Mat,
}

/// Appends the predicted next observation to the window, re-runs the
/// network and records the new last factor estimate and prediction, `n` times.
pub fn project(params: &TransformerParams, hyper: &Hyperparams, series: &Mat, t: usize, n: usize) -> Result<Tentacle> {
    let mut w = window_at(series, hyper.p, t)?;
    let mut x = Vec::with_capacity(n);
    let mut y = Mat::zeros(n, hyper.k);
    let mut next = net::forward(&w, params, hyper, Mode::Infer)?.y_hat_next().to_vec();
    for j in 0..n {
        for r in 0..hyper.p - 1 {
            let row = w.row(r + 1).to_vec();
            w.row_mut(r).copy_from_slice(&row);
        }
        w.row_mut(hyper.p - 1).copy_from_slice(&next);
        y.row_mut(j).copy_from_slice(&next);
        let trace = net::forward(&w, params, hyper, Mode::Infer)?;
        x.push(trace.x_hat_last());
        next = trace.y_hat_next().to_vec();
    }
    Ok(Tentacle { t0: t, x, y })
}

/// Column labels `lag_1..lag_P`, `lag_1` being the window's last period.
pub fn lag_labels(p: usize) -> Vec<String> {
    (1..=p).map(|j| format!("lag_{j}")).collect()
}

/// Snapshot matrix with one row per lag (most recent first) and columns
/// `var_1..var_k`.
pub fn attn_snapshot_csv(m: &Mat) -> String {
    let mut s = String::from("lag");
    for i in 1..=m.cols() {
        let _ = write!(s, ",var_{i}");
    }
    s.push('\n');
    for (j, label) in lag_labels(m.rows()).iter().enumerate() {
        let r = m.rows() - 1 - j;
        let _ = write!(s, "{label}");
        for v in m.row(r) {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// `t,<prefix>_1..` rows from a `T x m` matrix.
pub fn series_csv(ts: &[usize], m: &Mat, prefix: &str, reverse_cols: bool) -> String {
    let mut s = String::from("t");
    for i in 1..=m.cols() {
        let _ = write!(s, ",{prefix}_{i}");
    }
    s.push('\n');
    for (r, t) in ts.iter().enumerate() {
        let _ = write!(s, "{t}");
        let row = m.row(r);
        for c in 0..m.cols() {
            let v = if reverse_cols { row[m.cols() - 1 - c] } else { row[c] };
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// `t,var_1..var_k`.
pub fn attn_vars_csv(records: &[AttentionRecord]) -> String {
    let ts: Vec<usize> = records.iter().map(|r| r.t).collect();
    series_csv(&ts, &contribution_series(records).0, "var", false)
}

/// `t,lag_1..lag_P` of state (`measurement == false`) or measurement lag
/// contributions; `lag_1` is the window's last period.
pub fn attn_lags_csv(records: &[AttentionRecord], measurement: bool) -> String {
    let ts: Vec<usize> = records.iter().map(|r| r.t).collect();
    let (_, s, m) = contribution_series(records);
    series_csv(&ts, if measurement { &m } else { &s }, "lag", true)
}

/// `lag,Embed,Norm1,Attn,Norm2,FFN`, most recent lag first.
pub fn residual_stream_csv(rs: &ResidualStream) -> String {
    let mut s = String::from("lag,Embed,Norm1,Attn,Norm2,FFN\n");
    let p = rs.embed.len();
    for (j, label) in lag_labels(p).iter().enumerate() {
        let r = p - 1 - j;
        let _ = write!(s, "{label}");
        for st in rs.stages() {
            let _ = write!(s, ",{}", st[r]);
        }
        s.push('\n');
    }
    s
}

/// `t0,step,x_proj,y1..yk`.
pub fn tentacles_csv(tentacles: &[Tentacle], k: usize) -> String {
    let mut s = String::from("t0,step,x_proj");
    for i in 1..=k {
        let _ = write!(s, ",y{i}");
    }
    s.push('\n');
    for tn in tentacles {
        for (j, x) in tn.x.iter().enumerate() {
            let _ = write!(s, "{},{},{}", tn.t0, j + 1, x);
            for v in tn.y.row(j) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
    }
    s
}
