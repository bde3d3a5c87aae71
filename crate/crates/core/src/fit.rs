//! Least-squares line fits with slope confidence intervals, for log-log scaling studies.

use crate::error::{LabError, Result};
use statrs::distribution::{ContinuousCDF, StudentsT};

/// Fitted line `y = intercept + slope x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_stderr: f64,
    /// Half-width of the 95% confidence interval on the slope (zero with two points).
    pub slope_ci95: f64,
    pub r_squared: f64,
    pub n: usize,
}

/// Ordinary least squares.
pub fn fit_line(x: &[f64], y: &[f64]) -> Result<LineFit> {
    let n = x.len();
    if n < 2 || y.len() != n {
        return Err(LabError::InvalidParameter("line fit needs at least two matching points".into()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(LabError::InvalidParameter("line fit needs finite data".into()));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(LabError::Degenerate("abscissae are all equal".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let sse: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let (slope_stderr, slope_ci95) = if n > 2 {
        let se = (sse / (nf - 2.0) / sxx).sqrt();
        let t = StudentsT::new(0.0, 1.0, nf - 2.0).map_err(|e| LabError::InvalidParameter(e.to_string()))?;
        (se, t.inverse_cdf(0.975) * se)
    } else {
        (0.0, 0.0)
    };
    let r_squared = if syy > 0.0 { 1.0 - sse / syy } else { 1.0 };
    Ok(LineFit { slope, intercept, slope_stderr, slope_ci95, r_squared, n })
}

/// Fit `log y = a + p log x`; all data must be positive.
pub fn loglog_fit(x: &[f64], y: &[f64]) -> Result<LineFit> {
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(LabError::Degenerate("log-log fit needs positive data".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    fit_line(&lx, &ly)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_power_law() {
        let x: Vec<f64> = (0..6).map(|k| 0.01 * 2f64.powi(k)).collect();
        let y: Vec<f64> = x.iter().map(|v| 3.0 * v.powi(3)).collect();
        let f = loglog_fit(&x, &y).unwrap();
        assert!((f.slope - 3.0).abs() < 1e-12);
        assert!((f.intercept - 3f64.ln()).abs() < 1e-10);
        assert!(f.slope_ci95 < 1e-9);
        assert!(loglog_fit(&[1.0, 2.0], &[1.0, -1.0]).is_err());
    }

    #[test]
    fn confidence_interval_uses_student_quantile() {
        let x = [0.0, 1.0, 2.0, 3.0];
        let y = [0.1, 0.9, 2.1, 2.9];
        let f = fit_line(&x, &y).unwrap();
        // t_{0.975, 2} = 4.302652729...
        assert!((f.slope_ci95 / f.slope_stderr - 4.302652729749464).abs() < 1e-9);
    }
}
