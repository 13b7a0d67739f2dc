//! Paired comparison of per-run metrics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{DarError, Result};

/// Convention text attached to results whose differences have zero variance.
pub const ZERO_VARIANCE_CONVENTION: &str =
    "zero variance of differences: p = 1 when every difference is 0, p = 0 when the common difference is nonzero";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean_diff: f64,
    /// `None` when the statistic is undefined (zero variance).
    pub t: Option<f64>,
    pub df: usize,
    pub p_value: f64,
    pub convention: Option<String>,
}

/// Two-sided paired t-test of `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTestResult> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(DarError::LengthMismatch { a: a.len(), b: b.len() });
    }
    let n = a.len();
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    if var == 0.0 {
        let p = if d.iter().all(|&x| x == 0.0) { 1.0 } else { 0.0 };
        return Ok(TTestResult { n, mean_diff: mean, t: None, df, p_value: p, convention: Some(ZERO_VARIANCE_CONVENTION.into()) });
    }
    let t = mean / (var / n as f64).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64).map_err(|e| DarError::Config(e.to_string()))?;
    let p = (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0);
    Ok(TTestResult { n, mean_diff: mean, t: Some(t), df, p_value: p, convention: None })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_conventions() {
        assert_eq!(paired_ttest(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap().p_value, 1.0);
        assert_eq!(paired_ttest(&[2.0; 4], &[1.0; 4]).unwrap().p_value, 0.0);
        let r = paired_ttest(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.p_value, 0.0);
        assert!(r.convention.is_some());
    }

    #[test]
    fn length_checks() {
        assert!(paired_ttest(&[1.0], &[2.0]).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[2.0]).is_err());
    }

    #[test]
    fn known_value() {
        // differences [1, 2, 3, 4]: mean 2.5, sd 1.29099, t = 3.87298, df 3
        let r = paired_ttest(&[2.0, 4.0, 6.0, 8.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((r.t.unwrap() - 3.872983346207417).abs() < 1e-12);
        // scipy.stats.ttest_rel gives p = 0.030466...
        assert!((r.p_value - 0.030466).abs() < 1e-5, "{}", r.p_value);
    }
}
