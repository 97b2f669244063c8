//! Two-sided t-tests for comparing systems.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("need at least 2 samples per group, got {0}")]
    TooFewSamples(usize),
    #[error("paired samples differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub test: String,
    pub statistic: f64,
    pub df: f64,
    pub p_value: f64,
    /// Zero variance, so the statistic is 0 or infinite rather than
    /// t-distributed. Never marked significant.
    pub degenerate: bool,
    pub significant: bool,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
fn variance(x: &[f64]) -> f64 {
    if x.iter().all(|v| *v == x[0]) {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

fn two_sided(test: &str, diff: f64, se: f64, df: f64) -> TTest {
    if se == 0.0 || !se.is_finite() {
        let (statistic, p_value) = if diff == 0.0 {
            (0.0, 1.0)
        } else {
            (diff.signum() * f64::INFINITY, 0.0)
        };
        return TTest {
            test: test.to_string(),
            statistic,
            df,
            p_value,
            degenerate: true,
            significant: false,
        };
    }
    let t = diff / se;
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive degrees of freedom");
    let p = (2.0 * dist.cdf(-t.abs())).min(1.0);
    TTest {
        test: test.to_string(),
        statistic: t,
        df,
        p_value: p,
        degenerate: false,
        significant: p < SIGNIFICANCE_LEVEL,
    }
}

/// Paired t-test of `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(StatsError::TooFewSamples(a.len()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let se = (variance(&d) / n).sqrt();
    Ok(two_sided("paired t-test", mean(&d), se, n - 1.0))
}

/// Welch's unequal-variance t-test of `mean(a) - mean(b)`.
pub fn welch_ttest(a: &[f64], b: &[f64]) -> Result<TTest, StatsError> {
    for x in [a, b] {
        if x.len() < 2 {
            return Err(StatsError::TooFewSamples(x.len()));
        }
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (va, vb) = (variance(a) / na, variance(b) / nb);
    let se2 = va + vb;
    let df = if se2 > 0.0 {
        se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0))
    } else {
        na + nb - 2.0
    };
    Ok(two_sided("welch t-test", mean(a) - mean(b), se2.sqrt(), df))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paired_preconditions() {
        assert_eq!(
            paired_ttest(&[1.0], &[2.0]),
            Err(StatsError::TooFewSamples(1))
        );
        assert_eq!(
            paired_ttest(&[1.0, 2.0], &[2.0]),
            Err(StatsError::LengthMismatch(2, 1))
        );
        let same = paired_ttest(&[0.3, 0.5, 0.9], &[0.3, 0.5, 0.9]).unwrap();
        assert!(same.degenerate);
        assert_eq!((same.statistic, same.p_value), (0.0, 1.0));
        assert!(!same.significant);
    }

    #[test]
    fn welch_preconditions() {
        assert_eq!(
            welch_ttest(&[1.0, 2.0], &[2.0]),
            Err(StatsError::TooFewSamples(1))
        );
        let flat = welch_ttest(&[0.4, 0.4, 0.4], &[0.4, 0.4]).unwrap();
        assert!(flat.degenerate);
        assert!(!flat.significant);
        assert!(welch_ttest(&[1.0, 2.0, 3.0], &[2.0, 3.0, 4.0, 9.0]).is_ok());
    }
}
