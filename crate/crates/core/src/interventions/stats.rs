use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use super::{InterventionError, Result};

/// A brittleness ratio above this marks the across-family split as pronounced.
pub const TIER3_BRITTLENESS_RATIO: f64 = 5.0;

/// Relative change of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    /// Percent change, or the absolute change when `zero_baseline` is set.
    pub value: f64,
    pub zero_baseline: bool,
}

/// `100 · (treated − baseline) / |baseline|`; absolute difference with a flag when the baseline is zero.
pub fn percent_delta(baseline: f64, treated: f64) -> Delta {
    if baseline == 0.0 {
        Delta {
            value: treated - baseline,
            zero_baseline: true,
        }
    } else {
        Delta {
            value: 100.0 * (treated - baseline) / baseline.abs(),
            zero_baseline: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    /// Absent when the differences have zero variance and a non-zero mean.
    pub t: Option<f64>,
    pub p: f64,
    pub df: usize,
    /// Differences had zero variance but a non-zero mean; `p` is reported as 0.
    pub degenerate: bool,
}

/// Two-sided paired t-test on `a − b`.
pub fn paired_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(InterventionError::LengthMismatch(a.len(), b.len()));
    }
    let n = a.len();
    if n < 2 {
        return Err(InterventionError::TooFewSamples { min: 2, actual: n });
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = d.iter().sum::<f64>() / n as f64;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let df = n - 1;
    let scale = d.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    // variance below rounding noise of the differences counts as zero
    if var <= (f64::EPSILON * scale).powi(2) * n as f64 {
        return Ok(if mean.abs() <= f64::EPSILON * scale {
            TTest {
                t: Some(0.0),
                p: 1.0,
                df,
                degenerate: false,
            }
        } else {
            TTest {
                t: None,
                p: 0.0,
                degenerate: true,
                df,
            }
        });
    }
    let t = mean / (var / n as f64).sqrt();
    let nu = df as f64;
    let p = beta_reg(nu / 2.0, 0.5, nu / (nu + t * t)).clamp(0.0, 1.0);
    Ok(TTest {
        t: Some(t),
        p,
        df,
        degenerate: false,
    })
}

/// `γ = |Δ| / σ`.
pub fn brittleness(delta: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(InterventionError::NonPositiveSigma(sigma));
    }
    Ok(delta.abs() / sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn published_delta_directions() {
        assert!((percent_delta(100.0, 130.33).value - 30.33).abs() < 1e-9);
        assert!((percent_delta(0.5, 0.4878).value - (-2.43)).abs() < 0.02);
        let z = percent_delta(0.0, 0.3);
        assert!(z.zero_baseline && z.value == 0.3);
        assert_eq!(percent_delta(-2.0, -1.0).value, 50.0);
    }

    #[test]
    fn ttest_closed_form() {
        let a = [1.0, 2.0, 3.0];
        let b = [0.0; 3];
        let r = paired_ttest(&a, &b).unwrap();
        let t = r.t.unwrap();
        assert!((t - 2.0 * 3f64.sqrt()).abs() < 1e-12);
        // df = 2: p = 1 − t / √(t² + 2) in closed form
        let p = 1.0 - t / (t * t + 2.0).sqrt();
        assert!((r.p - p).abs() < 1e-12, "{} vs {p}", r.p);
        assert!((r.p - 0.0742).abs() < 1e-4);
    }

    #[test]
    fn ttest_degenerate_cases() {
        let a = [0.3, 0.4, 0.5];
        let same = paired_ttest(&a, &a).unwrap();
        assert_eq!((same.t, same.p, same.degenerate), (Some(0.0), 1.0, false));
        let shifted: Vec<f64> = a.iter().map(|x| x + 1.0).collect();
        let r = paired_ttest(&shifted, &a).unwrap();
        assert!(r.degenerate && r.p == 0.0 && r.t.is_none());
        assert!(matches!(paired_ttest(&[1.0], &[2.0]), Err(InterventionError::TooFewSamples { .. })));
        assert!(matches!(paired_ttest(&[1.0, 2.0], &[2.0]), Err(InterventionError::LengthMismatch(2, 1))));
    }

    #[test]
    fn brittleness_examples() {
        let ratio = brittleness(40.0, 0.1).unwrap() / brittleness(-1.0, 0.1).unwrap();
        assert!((ratio - 40.0).abs() < 1e-9);
        assert!(ratio > TIER3_BRITTLENESS_RATIO);
        assert_eq!(brittleness(0.0, 0.1).unwrap(), 0.0);
        assert!(matches!(brittleness(1.0, 0.0), Err(InterventionError::NonPositiveSigma(_))));
    }
}
