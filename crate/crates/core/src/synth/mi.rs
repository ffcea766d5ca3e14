//! Exact mutual information along a discrete Markov chain of channels.
//!
//! `X` is uniform over `V` symbols and `h⁽⁰⁾ = X`. Layer `ℓ ≥ 1` applies the
//! channel `K = (1 − ε) I + ε U`, where `U` replaces the symbol with a
//! uniformly random one. Within a scale `ε` is `within_scale_noise`;
//! the channel entering a planted boundary mixes `mixing_contrast` times as
//! hard (capped at full mixing).

use serde::{Deserialize, Serialize};

use super::{Result, SynthError, SyntheticModelSpec};

/// Largest alphabet enumerated exactly.
pub const MAX_VOCAB: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiCurve {
    /// `I(X; h⁽ℓ⁾)` in nats, one per layer.
    pub values: Vec<f64>,
    /// `slopes[k] = values[k + 1] − values[k]`.
    pub slopes: Vec<f64>,
    /// Layers whose incoming channel is a boundary channel.
    pub boundaries: Vec<usize>,
}

impl MiCurve {
    /// Change in slope magnitude across the step into `layer`.
    pub fn slope_gap(&self, layer: usize) -> f64 {
        assert!(layer >= 2 && layer < self.values.len(), "no slope on both sides of layer {layer}");
        (self.slopes[layer - 1].abs() - self.slopes[layer - 2].abs()).abs()
    }

    /// Largest change in slope magnitude between two consecutive steps that
    /// both stay inside one scale.
    pub fn within_scale_variation(&self) -> f64 {
        let is_boundary_step = |k: usize| self.boundaries.contains(&(k + 1));
        (1..self.slopes.len())
            .filter(|&k| !is_boundary_step(k) && !is_boundary_step(k - 1))
            .map(|k| (self.slopes[k].abs() - self.slopes[k - 1].abs()).abs())
            .fold(0.0, f64::max)
    }
}

/// Row-stochastic `V × V` matrix `(1 − ε) I + ε / V`.
pub fn mixing_channel(vocab: usize, epsilon: f64) -> Vec<Vec<f64>> {
    let e = epsilon.clamp(0.0, 1.0);
    (0..vocab)
        .map(|i| (0..vocab).map(|j| e / vocab as f64 + if i == j { 1.0 - e } else { 0.0 }).collect())
        .collect()
}

/// `I(X; Y)` for uniform `X` and conditional `p(y | x) = cond[x][y]`.
fn mutual_information(cond: &[Vec<f64>]) -> f64 {
    let v = cond.len() as f64;
    let ny = cond[0].len();
    let marginal: Vec<f64> = (0..ny).map(|y| cond.iter().map(|r| r[y]).sum::<f64>() / v).collect();
    let mut mi = 0.0;
    for row in cond {
        for (y, &p) in row.iter().enumerate() {
            if p > 0.0 {
                mi += p / v * (p / marginal[y]).ln();
            }
        }
    }
    mi.max(0.0)
}

fn compose(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(&p, br)| p * br[j]).sum())
                .collect()
        })
        .collect()
}

/// Exact information curve for an explicit list of channels (one per layer after the first).
pub fn mi_curve_from_channels(vocab: usize, channels: &[Vec<Vec<f64>>], boundaries: Vec<usize>) -> Result<MiCurve> {
    if vocab > MAX_VOCAB {
        return Err(SynthError::AlphabetTooLarge { vocab, max: MAX_VOCAB });
    }
    let mut cond = mixing_channel(vocab, 0.0);
    let mut values = vec![mutual_information(&cond)];
    for k in channels {
        cond = compose(&cond, k);
        values.push(mutual_information(&cond));
    }
    let slopes = values.windows(2).map(|w| w[1] - w[0]).collect();
    Ok(MiCurve {
        values,
        slopes,
        boundaries,
    })
}

/// `I(X; h⁽ℓ⁾)` for every layer of the discrete twin of `spec`.
pub fn exact_mi_curve(spec: &SyntheticModelSpec) -> Result<MiCurve> {
    spec.validate()?;
    if spec.vocab_size > MAX_VOCAB {
        return Err(SynthError::AlphabetTooLarge {
            vocab: spec.vocab_size,
            max: MAX_VOCAB,
        });
    }
    let boundaries = vec![spec.planted_li, spec.planted_ig];
    let channels: Vec<_> = (1..spec.num_layers)
        .map(|l| {
            let eps = if boundaries.contains(&l) {
                spec.mixing_contrast * spec.within_scale_noise
            } else {
                spec.within_scale_noise
            };
            mixing_channel(spec.vocab_size, eps)
        })
        .collect();
    mi_curve_from_channels(spec.vocab_size, &channels, boundaries)
}
