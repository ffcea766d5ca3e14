//! Jensen–Shannon divergence and the attention-drift signal.

use super::{Result, SignalError, SignalKind, SignalSeries};
use crate::dataio::AttentionSummary;

/// `JS(P, Q) = ½ KL(P‖M) + ½ KL(Q‖M)`, `M = ½(P + Q)`, in nats, with `0·ln 0 = 0`.
///
/// Bounded by `ln 2`. Inputs are assumed to be probability vectors of equal length.
pub fn js_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            acc += a * (a / m).ln();
        }
        if b > 0.0 {
            acc += b * (b / m).ln();
        }
    }
    (0.5 * acc).clamp(0.0, std::f64::consts::LN_2)
}

/// Per-sentence JS divergence for each gap: `out[gap][sentence]`.
pub(crate) fn per_sentence_js(attn: &[AttentionSummary]) -> Result<Vec<Vec<f64>>> {
    if attn.len() < 2 {
        return Err(SignalError::TooFewLayers(attn.len()));
    }
    let b0 = attn[0].buckets();
    let s0 = attn[0].num_sentences();
    for a in attn {
        if a.buckets() != b0 {
            return Err(SignalError::BucketMismatch(b0, a.buckets()));
        }
        if a.num_sentences() != s0 {
            return Err(SignalError::LengthMismatch(vec![s0, a.num_sentences()]));
        }
        a.validate().map_err(|e| match e {
            crate::dataio::DataError::InvalidDistribution { layer, sentence, .. } => {
                SignalError::InvalidDistribution { layer, sentence }
            }
            other => SignalError::Data(other),
        })?;
    }
    let rows: Vec<Vec<Vec<f64>>> = attn
        .iter()
        .map(|a| {
            a.distribution
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|&v| v as f64).collect())
                .collect()
        })
        .collect();
    Ok(rows
        .windows(2)
        .map(|w| w[0].iter().zip(&w[1]).map(|(p, q)| js_divergence(p, q)).collect())
        .collect())
}

/// `S3(ℓ)` = mean over sentences of `JS(A_ℓ, A_ℓ₊₁)`.
pub fn attention_drift_signal(attn: &[AttentionSummary]) -> Result<SignalSeries> {
    let per = per_sentence_js(attn)?;
    Ok(SignalSeries::new(
        SignalKind::AttentionDrift,
        per.iter().map(|g| g.iter().sum::<f64>() / g.len() as f64).collect(),
    ))
}
