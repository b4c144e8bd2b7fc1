//! Distance-vs-horizon series and log-log fitting primitives.

use serde::{Deserialize, Serialize};

use crate::{LsaError, Result};

/// Which distance estimator produced a series.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HalfspaceSup,
    BallSup,
    Kolmogorov1dExact,
    /// Operator-norm gap between covariance matrices (not a probability
    /// metric; the `[0, 1]` range convention does not apply).
    OperatorNorm,
}

/// Reference law the distances are measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceLaw {
    SigmaN,
    SigmaInf,
    StandardNormal,
    /// An empirical (Monte-Carlo) law, e.g. the real-world sample in the
    /// bootstrap-validity comparison.
    Empirical,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub n: u64,
    pub distance: f64,
    pub std_err: f64,
}

/// `(n, distance)` measurements at increasing horizons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceSeries {
    pub metric: Metric,
    pub reference: ReferenceLaw,
    pub points: Vec<SeriesPoint>,
}

impl DistanceSeries {
    pub fn new(metric: Metric, reference: ReferenceLaw, points: Vec<SeriesPoint>) -> Self {
        debug_assert!(points.windows(2).all(|w| w[0].n < w[1].n));
        Self {
            metric,
            reference,
            points,
        }
    }

    /// CSV rendering with columns `n,distance,std_err`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,distance,std_err\n");
        for p in &self.points {
            out.push_str(&format!("{},{},{}\n", p.n, p.distance, p.std_err));
        }
        out
    }
}

/// Ordinary least squares of `ys` on `xs`.
///
/// Returns `(slope, intercept, r_squared, slope_stderr)`. The standard error
/// is computed from the residual variance and is zero when fewer than three
/// points are supplied.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if xs.len() != ys.len() {
        return Err(LsaError::DimensionMismatch {
            expected: xs.len(),
            got: ys.len(),
        });
    }
    let m = xs.len();
    if m < 2 {
        return Err(LsaError::InvalidParameter(
            "need at least two points for a line fit".into(),
        ));
    }
    let mf = m as f64;
    let x_mean = xs.iter().sum::<f64>() / mf;
    let y_mean = ys.iter().sum::<f64>() / mf;
    let sxx: f64 = xs.iter().map(|x| (x - x_mean).powi(2)).sum();
    if sxx <= 0.0 {
        return Err(LsaError::InvalidParameter(
            "degenerate design: all abscissae equal".into(),
        ));
    }
    let sxy: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (x - x_mean) * (y - y_mean))
        .sum();
    let slope = sxy / sxx;
    let intercept = y_mean - slope * x_mean;
    let rss: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (y - (intercept + slope * x)).powi(2))
        .sum();
    let tss: f64 = ys.iter().map(|y| (y - y_mean).powi(2)).sum();
    let r_squared = if tss > 0.0 { 1.0 - rss / tss } else { 1.0 };
    let slope_stderr = if m > 2 {
        (rss / ((mf - 2.0) * sxx)).sqrt()
    } else {
        0.0
    };
    Ok((slope, intercept, r_squared, slope_stderr))
}

/// OLS in log-log space; inputs must be strictly positive.
pub fn fit_loglog(xs: &[f64], ys: &[f64]) -> Result<(f64, f64, f64, f64)> {
    if xs.iter().chain(ys).any(|&v| v <= 0.0) {
        return Err(LsaError::InvalidParameter(
            "log-log fit requires strictly positive values".into(),
        ));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_line_recovered() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys: Vec<f64> = xs.iter().map(|x| 2.5 * x - 1.0).collect();
        let (slope, intercept, r2, se) = fit_line(&xs, &ys).unwrap();
        assert!((slope - 2.5).abs() < 1e-12);
        assert!((intercept + 1.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
        assert!(se < 1e-12);
    }

    #[test]
    fn power_law_recovered_in_loglog() {
        let xs = [2.0, 4.0, 8.0, 16.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 4.0 * x.powf(-1.0 / 3.0)).collect();
        let (slope, _, r2, _) = fit_loglog(&xs, &ys).unwrap();
        assert!((slope + 1.0 / 3.0).abs() < 1e-12);
        assert!((r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_design_rejected() {
        let xs = [2.0, 2.0, 2.0];
        let ys = [1.0, 2.0, 3.0];
        assert!(fit_line(&xs, &ys).is_err());
    }
}
