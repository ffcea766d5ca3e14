//! Evidence fusion and prominence-based boundary detection.

use serde::{Deserialize, Serialize};

use super::{Result, SignalError, SignalSeries};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    /// Weights for (representation change, probe jump, attention drift).
    pub weights: [f64; 3],
    pub prominence_threshold: f64,
    pub bootstrap_iterations: usize,
    pub ci_level: f64,
    /// Boundaries are accepted when their CI is strictly narrower than this (layers).
    pub max_ci_width: f64,
    pub rng_seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            weights: [1.0, 0.8, 0.6],
            prominence_threshold: 0.3,
            bootstrap_iterations: 1000,
            ci_level: 0.95,
            max_ci_width: 5.0,
            rng_seed: 0,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(SignalError::InvalidConfig(format!("weights must be non-negative, got {:?}", self.weights)));
        }
        if !self.weights.iter().any(|&w| w > 0.0) {
            return Err(SignalError::InvalidConfig("at least one weight must be positive".into()));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(SignalError::InvalidConfig(format!("ci_level {} outside (0, 1)", self.ci_level)));
        }
        if self.bootstrap_iterations == 0 {
            return Err(SignalError::InvalidConfig("bootstrap_iterations must be positive".into()));
        }
        if !self.prominence_threshold.is_finite() || !self.max_ci_width.is_finite() {
            return Err(SignalError::InvalidConfig("thresholds must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceCurve {
    pub values: Vec<f64>,
    /// Each signal divided by its own maximum (zero where the signal is identically zero).
    pub components: [Vec<f64>; 3],
}

/// `E(ℓ) = Σᵢ wᵢ Sᵢ(ℓ) / maxₗ Sᵢ`.
pub fn fuse_evidence(s1: &SignalSeries, s2: &SignalSeries, s3: &SignalSeries, cfg: &FusionConfig) -> Result<EvidenceCurve> {
    let lens = vec![s1.len(), s2.len(), s3.len()];
    if lens.iter().any(|&l| l != lens[0]) {
        return Err(SignalError::LengthMismatch(lens));
    }
    let norm = |s: &SignalSeries| -> Vec<f64> {
        let max = s.values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 {
            s.values.iter().map(|v| v / max).collect()
        } else {
            vec![0.0; s.len()]
        }
    };
    let components = [norm(s1), norm(s2), norm(s3)];
    let values = (0..lens[0])
        .map(|g| (0..3).map(|i| cfg.weights[i] * components[i][g]).sum())
        .collect();
    Ok(EvidenceCurve { values, components })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub gap: usize,
    /// Height on the max-normalized curve.
    pub height: f64,
    pub prominence: f64,
}

/// Local maxima of `values` with their topographic prominence.
///
/// A flat top counts once, at its left-middle sample. End points are never peaks.
/// Prominence is the height above the higher of the two lowest points reached
/// when walking left and right until a strictly higher sample (or the edge).
pub fn find_peaks(values: &[f64]) -> Vec<Peak> {
    let n = values.len();
    let mut peaks = Vec::new();
    let mut i = 1;
    while i + 1 < n {
        if values[i - 1] < values[i] {
            let mut ahead = i + 1;
            while ahead + 1 < n && values[ahead] == values[i] {
                ahead += 1;
            }
            if values[ahead] < values[i] {
                let left_edge = i;
                let right_edge = ahead - 1;
                let gap = (left_edge + right_edge) / 2;
                peaks.push(Peak {
                    gap,
                    height: values[gap],
                    prominence: prominence(values, gap),
                });
                i = ahead;
                continue;
            }
        }
        i += 1;
    }
    peaks
}

fn prominence(values: &[f64], peak: usize) -> f64 {
    let h = values[peak];
    let mut left_min = h;
    for j in (0..peak).rev() {
        if values[j] > h {
            break;
        }
        left_min = left_min.min(values[j]);
    }
    let mut right_min = h;
    for &v in &values[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPair {
    pub li_layer: usize,
    pub ig_layer: usize,
    /// Every local maximum of the normalized curve, qualifying or not.
    pub peaks: Vec<Peak>,
}

/// Picks the two most prominent peaks of `E/max(E)` at or above the threshold.
///
/// Gap `ℓ` maps to boundary layer `ℓ + 1`; the earlier one is L-I.
pub fn detect_boundaries(curve: &EvidenceCurve, cfg: &FusionConfig, num_layers: usize) -> Result<BoundaryPair> {
    let n = curve.values.len();
    if n < 3 {
        return Err(SignalError::CurveTooShort(n));
    }
    debug_assert_eq!(n + 1, num_layers);
    let max = curve.values.iter().cloned().fold(0.0, f64::max);
    if !(max > 0.0) {
        return Err(SignalError::InsufficientPeaks { peaks: Vec::new() });
    }
    let normalized: Vec<f64> = curve.values.iter().map(|v| v / max).collect();
    let peaks = find_peaks(&normalized);
    let mut qualifying: Vec<Peak> = peaks
        .iter()
        .copied()
        .filter(|p| p.prominence >= cfg.prominence_threshold)
        .collect();
    if qualifying.len() < 2 {
        return Err(SignalError::InsufficientPeaks { peaks });
    }
    qualifying.sort_by(|a, b| {
        b.prominence
            .total_cmp(&a.prominence)
            .then(b.height.total_cmp(&a.height))
            .then(a.gap.cmp(&b.gap))
    });
    let (a, b) = (qualifying[0].gap + 1, qualifying[1].gap + 1);
    Ok(BoundaryPair {
        li_layer: a.min(b),
        ig_layer: a.max(b),
        peaks,
    })
}
