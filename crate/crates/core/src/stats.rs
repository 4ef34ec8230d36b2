//! Small Monte Carlo statistics helpers.

use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::error::{Error, Result};

/// Sample mean and standard error `sd / √n` (`sd` with `n − 1`). The
/// standard error is NaN for fewer than two samples.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Two-sided standard normal quantile `z` with `P(|Z| ≤ z) = level`.
pub fn normal_quantile(level: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + level / 2.0)
}

/// Two-sided Student t quantile.
pub fn student_t_quantile(level: f64, dof: f64) -> f64 {
    StudentsT::new(0.0, 1.0, dof).expect("positive degrees of freedom").inverse_cdf(0.5 + level / 2.0)
}

/// Wilson score interval for `k` successes out of `n` trials.
pub fn wilson_interval(k: usize, n: usize, level: f64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    let z = normal_quantile(level);
    let n = n as f64;
    let p = k as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let centre = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    /// Classical OLS standard error of the slope (NaN for two points).
    pub slope_se: f64,
}

/// Ordinary least squares `y ≈ intercept + slope · x`.
pub fn ols(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n != y.len() || n < 2 {
        return Err(Error::DegenerateFit(format!("need at least two paired points, got {} and {}", n, y.len())));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::DegenerateFit("non-finite data point".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::DegenerateFit("all abscissae coincide".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let slope_se = if n > 2 {
        let rss: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
        (rss / (nf - 2.0) / sxx).sqrt()
    } else {
        f64::NAN
    };
    Ok(LineFit { slope, intercept, slope_se })
}

/// Supremum over a time grid of the ensemble mean of a per-replica series.
#[derive(Clone, Debug, PartialEq)]
pub struct SupStat {
    pub estimate: f64,
    /// Standard error of the mean at the maximizing time.
    pub stderr: f64,
    /// Time index where the maximum is attained (first one on ties).
    pub index: usize,
    pub replicas: usize,
}

/// `sup_t E[X(t)]` from `series[r][t]`; every replica must share the grid.
pub fn moment_sup(series: &[Vec<f64>]) -> Result<SupStat> {
    let Some(first) = series.first() else {
        return Err(Error::InvalidArgument("moment_sup needs a nonempty ensemble".into()));
    };
    let n_t = first.len();
    if n_t == 0 || series.iter().any(|s| s.len() != n_t) {
        return Err(Error::InvalidArgument("ensemble series must share a nonempty time grid".into()));
    }
    let mut best: Option<(f64, usize)> = None;
    let mut column = vec![0.0; series.len()];
    for t in 0..n_t {
        let m = series.iter().map(|s| s[t]).sum::<f64>() / series.len() as f64;
        if best.is_none_or(|(b, _)| m > b) {
            best = Some((m, t));
        }
    }
    let (_, index) = best.unwrap();
    for (c, s) in column.iter_mut().zip(series) {
        *c = s[index];
    }
    let (estimate, stderr) = mean_stderr(&column);
    Ok(SupStat { estimate, stderr, index, replicas: series.len() })
}
