//! Optimal L1 scaling of factor estimates and accuracy metrics.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::optim::golden_section;
use crate::stats::{correlation, mean, median, mse, ols_line, std_dev, variance};

/// Affine map `gamma0 + gamma1 * x` from a raw estimate to the factor scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScalingParams {
    pub gamma0: f64,
    pub gamma1: f64,
    /// Set when the raw estimate is constant over the fitting span.
    pub degenerate: bool,
}

impl ScalingParams {
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter().map(|v| self.gamma0 + self.gamma1 * v).collect()
    }
}

/// Sum of absolute residuals of `gamma0 + gamma1 * x` against `y`.
pub fn l1_objective(x: &[f64], y: &[f64], gamma0: f64, gamma1: f64) -> f64 {
    x.iter().zip(y).map(|(a, b)| (b - gamma0 - gamma1 * a).abs()).sum()
}

fn residual_median(x: &[f64], y: &[f64], gamma1: f64) -> f64 {
    let r: Vec<f64> = x.iter().zip(y).map(|(a, b)| b - gamma1 * a).collect();
    median(&r)
}

fn profile(x: &[f64], y: &[f64], gamma1: f64) -> f64 {
    l1_objective(x, y, residual_median(x, y, gamma1), gamma1)
}

fn abs_dev_from_median(v: &[f64]) -> f64 {
    let m = median(v);
    v.iter().map(|a| (a - m).abs()).sum()
}

/// Least-absolute-deviations affine fit of `x_true` on `x_raw` over `span`.
///
/// For a fixed slope the best intercept is the median residual, so the
/// search runs over the slope alone. The profile objective is convex and
/// any minimizer satisfies `|gamma1| <= 2 * S_y / S_x`, where `S_v` is the
/// sum of absolute deviations from the median; golden-section search on that
/// bracket converges to the optimum.
pub fn fit_scaling(x_raw: &[f64], x_true: &[f64], span: Range<usize>) -> Result<ScalingParams> {
    if span.end > x_raw.len() || span.end > x_true.len() || span.len() < 10 {
        return Err(Error::Config(format!(
            "scaling span {span:?} needs at least 10 periods within both series"
        )));
    }
    let x = &x_raw[span.clone()];
    let y = &x_true[span];
    if !x.iter().chain(y).all(|v| v.is_finite()) {
        return Err(Error::Degenerate("non-finite value in scaling span".into()));
    }
    let sx = abs_dev_from_median(x);
    if sx == 0.0 || variance(x) == 0.0 {
        return Ok(ScalingParams { gamma0: median(y), gamma1: 0.0, degenerate: true });
    }
    let bound = 2.0 * abs_dev_from_median(y) / sx * (1.0 + 1e-9) + 1e-12;
    let g1 = golden_section(|g| profile(x, y, g), -bound, bound, 1e-13 * bound.max(1e-300));
    // the OLS and unscaled candidates guard against a flat profile
    let mut best = (profile(x, y, g1), g1);
    let mut candidates = vec![1.0];
    if let Some((_, b)) = ols_line(x, y) {
        candidates.push(b);
    }
    for c in candidates {
        let f = profile(x, y, c);
        if f < best.0 {
            best = (f, c);
        }
    }
    let g1 = best.1;
    Ok(ScalingParams { gamma0: residual_median(x, y, g1), gamma1: g1, degenerate: false })
}

/// True when the scaled estimate is too flat to use: its standard deviation
/// is below a tenth of the true factor's over `span`.
pub fn flatline_check(x_raw: &[f64], scaling: &ScalingParams, x_true: &[f64], span: Range<usize>) -> bool {
    let scaled = scaling.apply(&x_raw[span.clone()]);
    let sd_true = std_dev(&x_true[span]);
    if sd_true == 0.0 {
        return true;
    }
    std_dev(&scaled) / sd_true < 0.1
}

/// Raw factor estimates of the competing models, aligned with the truth.
#[derive(Debug, Clone, Default)]
pub struct MetricsInput<'a> {
    pub x_true: &'a [f64],
    /// Span on which each estimate's scaling is fitted.
    pub scale_span: Range<usize>,
    /// Span on which accuracy is measured.
    pub test_span: Range<usize>,
    pub transformer: &'a [f64],
    pub kalman: &'a [f64],
    pub kalman_max: Option<&'a [f64]>,
    pub oracle: Option<&'a [f64]>,
    pub mean_y: Option<&'a [f64]>,
    /// Ensemble built from each run's best-on-test epoch.
    pub transformer_max: Option<&'a [f64]>,
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub mse: BTreeMap<String, f64>,
    pub r2: BTreeMap<String, f64>,
    pub fit: f64,
    pub fit_max: Option<f64>,
    /// Absent when the Kalman/oracle gap is negligible.
    pub gain: Option<f64>,
    pub corr: f64,
    pub val_loss: Option<f64>,
    pub discarded: bool,
}

/// `(MSE_K - MSE_T) / MSE_K * 100`.
pub fn fit_percent(mse_t: f64, mse_k: f64) -> f64 {
    (mse_k - mse_t) / mse_k * 100.0
}

/// Share of the Kalman-to-oracle gap recovered, in percent; `None` when the
/// gap is below `1e-6 * var_x`.
pub fn gain_percent(mse_t: f64, mse_k: f64, mse_o: f64, var_x: f64) -> Option<f64> {
    let gap = mse_k - mse_o;
    if gap.abs() < 1e-6 * var_x {
        None
    } else {
        Some((mse_k - mse_t) / gap * 100.0)
    }
}

pub fn r2(mse: f64, var_x: f64) -> f64 {
    1.0 - mse / var_x
}

/// Scaled test-span series and its MSE for one raw estimate.
pub fn scaled_test(raw: &[f64], x_true: &[f64], scale_span: Range<usize>, test: Range<usize>) -> Result<(ScalingParams, Vec<f64>, f64)> {
    if raw.len() != x_true.len() {
        return Err(Error::Config("estimate and truth have different lengths".into()));
    }
    let s = fit_scaling(raw, x_true, scale_span)?;
    let scaled = s.apply(&raw[test.clone()]);
    let m = mse(&scaled, &x_true[test]);
    Ok((s, scaled, m))
}

pub fn metrics(input: &MetricsInput) -> Result<MetricsReport> {
    let test = input.test_span.clone();
    if test.end > input.x_true.len() || test.is_empty() {
        return Err(Error::Config("test span outside the series".into()));
    }
    let var_x = variance(&input.x_true[test.clone()]);
    if var_x == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let run = |raw: &[f64]| scaled_test(raw, input.x_true, input.scale_span.clone(), test.clone());
    let (s_t, scaled_t, mse_t) = run(input.transformer)?;
    let (_, _, mse_k) = run(input.kalman)?;
    let mut mse_map = BTreeMap::new();
    mse_map.insert("transformer".to_string(), mse_t);
    mse_map.insert("kalman".to_string(), mse_k);
    let mut mse_o = None;
    for (name, raw) in [("kalman_max", input.kalman_max), ("oracle", input.oracle), ("mean_y", input.mean_y)] {
        if let Some(raw) = raw {
            let m = run(raw)?.2;
            if name == "oracle" {
                mse_o = Some(m);
            }
            mse_map.insert(name.to_string(), m);
        }
    }
    let r2_map = mse_map.iter().map(|(k, m)| (k.clone(), r2(*m, var_x))).collect();
    let fit_max = match input.transformer_max {
        Some(raw) => Some(fit_percent(run(raw)?.2, mse_k)),
        None => None,
    };
    let discarded = s_t.degenerate || flatline_check(input.transformer, &s_t, input.x_true, input.scale_span.clone());
    Ok(MetricsReport {
        fit: fit_percent(mse_t, mse_k),
        fit_max,
        gain: mse_o.and_then(|o| gain_percent(mse_t, mse_k, o, var_x)),
        corr: correlation(&scaled_t, &input.x_true[test]),
        val_loss: input.val_loss,
        mse: mse_map,
        r2: r2_map,
        discarded,
    })
}

impl MetricsReport {
    /// Flat JSON object with `mse_*`, `r2_*` and scalar keys.
    pub fn to_json(&self) -> serde_json::Value {
        let mut m = serde_json::Map::new();
        for (k, v) in &self.mse {
            m.insert(format!("mse_{k}"), (*v).into());
        }
        for (k, v) in &self.r2 {
            m.insert(format!("r2_{k}"), (*v).into());
        }
        m.insert("fit".into(), self.fit.into());
        m.insert("fit_max".into(), self.fit_max.into());
        m.insert("gain".into(), self.gain.into());
        m.insert("corr".into(), self.corr.into());
        m.insert("val_loss".into(), self.val_loss.into());
        m.insert("discarded".into(), self.discarded.into());
        serde_json::Value::Object(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_json())? + "\n")?;
        Ok(())
    }
}

/// Least-squares slope of test Fit against validation loss over the epochs
/// where both are recorded. Negative slopes mean lower loss goes with
/// better factor accuracy.
pub fn loss_fit_slope(val_loss: &[f64], fit: &[Option<f64>]) -> Result<f64> {
    let (l, f): (Vec<f64>, Vec<f64>) = val_loss.iter().zip(fit).filter_map(|(l, f)| f.map(|f| (*l, f))).unzip();
    if l.len() < 3 {
        return Err(Error::Degenerate("need at least 3 epochs with loss and fit".into()));
    }
    ols_line(&l, &f)
        .map(|(_, b)| b)
        .ok_or_else(|| Error::Degenerate("validation loss has zero variance".into()))
}

/// `m (sd)` with one decimal, the layout used for seed-averaged results.
pub fn format_mean_sd(values: &[f64]) -> String {
    if values.is_empty() {
        return "-".into();
    }
    let sd = if values.len() > 1 {
        let m = mean(values);
        (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    format!("{:.1} ({:.1})", mean(values), sd)
}
