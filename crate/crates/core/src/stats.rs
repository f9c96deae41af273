//! Small descriptive-statistics helpers shared across modules.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population variance (divides by `n`).
pub fn variance(xs: &[f64]) -> f64 {
    let m = mean(xs);
    xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    variance(xs).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn covariance(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum::<f64>() / xs.len() as f64
}

/// Pearson correlation; NaN when either input is constant.
pub fn correlation(xs: &[f64], ys: &[f64]) -> f64 {
    covariance(xs, ys) / (std_dev(xs) * std_dev(ys))
}

/// Least-squares fit `y ≈ intercept + slope * x`; returns `(intercept, slope)`.
/// `None` when `x` has no variance.
pub fn ols_line(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let vx = variance(xs);
    if !(vx > 0.0) || !vx.is_finite() {
        return None;
    }
    let slope = covariance(xs, ys) / vx;
    Some((mean(ys) - slope * mean(xs), slope))
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Standardizes a column in place with the population moments; returns `(mean, sd)`.
pub fn standardize(xs: &mut [f64]) -> (f64, f64) {
    let m = mean(xs);
    let sd = std_dev(xs);
    for x in xs.iter_mut() {
        *x = (*x - m) / sd;
    }
    (m, sd)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn ols_recovers_line() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y: Vec<f64> = x.iter().map(|v| 1.0 - 2.0 * v).collect();
        let (a, b) = ols_line(&x, &y).unwrap();
        assert!((a - 1.0).abs() < 1e-12 && (b + 2.0).abs() < 1e-12);
        assert!(ols_line(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }
}
