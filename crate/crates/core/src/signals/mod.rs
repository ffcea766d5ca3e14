//! Boundary signals over adjacent-layer gaps, their fusion into one evidence
//! curve, peak detection, and sentence-level bootstrap of the boundary layers.
//!
//! Gap `ℓ` compares layer `ℓ` with layer `ℓ + 1`, so a model with `L` layers
//! yields `L − 1` values per signal:
//!
//! * representation change: `1 / CKA(H_ℓ, H_ℓ₊₁)` with linear, feature-centered CKA;
//! * probe jump: `|P(ℓ+1) − P(ℓ)| / P(ℓ)` where `P` is mean probe macro-F1;
//! * attention drift: mean per-sentence Jensen–Shannon divergence (nats).

mod bootstrap;
mod cka;
mod fusion;
mod js;
mod probe;

pub use bootstrap::{accept, bootstrap_boundaries, bootstrap_from_cache, detect, MIN_BOOTSTRAP_SENTENCES, Acceptance, BoundaryResult, DetectConfig, Detection, SentenceCache};
pub use cka::{linear_cka, repr_change_signal, subsample_units, GramCache, TokenUnit};
pub use fusion::{detect_boundaries, find_peaks, fuse_evidence, BoundaryPair, EvidenceCurve, FusionConfig, Peak};
pub use js::{attention_drift_signal, js_divergence};
pub use probe::{macro_f1, probe_jump_signal, split_sentences, train_probe, FittedProbe, ProbeConfig, ProbeOutcome};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DataError;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("need at least 2 layers, got {0}")]
    TooFewLayers(usize),
    #[error("layer {layer} has zero variance; CKA is undefined")]
    DegenerateLayer { layer: usize },
    #[error("gap {gap}: CKA is zero, representation-change signal is unbounded")]
    ZeroAlignment { gap: usize },
    #[error("layers disagree on token count ({0} vs {1})")]
    TokenCountMismatch(usize, usize),
    #[error("probe score at layer {layer} is {score}; scores must be positive")]
    NonPositiveScore { layer: usize, score: f64 },
    #[error("training split contains a single class")]
    SingleClassSplit,
    #[error("attention bucket counts differ ({0} vs {1})")]
    BucketMismatch(usize, usize),
    #[error("attention for layer {layer} sentence {sentence} is not a distribution")]
    InvalidDistribution { layer: usize, sentence: usize },
    #[error("signal lengths differ: {0:?}")]
    LengthMismatch(Vec<usize>),
    #[error("evidence curve needs at least 3 gaps, got {0}")]
    CurveTooShort(usize),
    #[error("fewer than two peaks reach the prominence threshold; candidates: {peaks:?}")]
    InsufficientPeaks { peaks: Vec<Peak> },
    #[error("bootstrap needs at least {min} sentences, dump has {actual}")]
    TooFewSentences { min: usize, actual: usize },
    #[error("{failed} of {iterations} bootstrap iterations found fewer than two peaks")]
    BootstrapInsufficientPeaks {
        failed: usize,
        iterations: usize,
        peaks: Vec<Peak>,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl SignalError {
    /// True for every flavour of "no two qualifying peaks".
    pub fn is_insufficient_peaks(&self) -> bool {
        matches!(
            self,
            SignalError::InsufficientPeaks { .. } | SignalError::BootstrapInsufficientPeaks { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    ReprChange,
    ProbeJump,
    AttentionDrift,
}

/// One boundary signal, indexed by layer gap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSeries {
    pub kind: SignalKind,
    pub values: Vec<f64>,
}

impl SignalSeries {
    pub fn new(kind: SignalKind, values: Vec<f64>) -> Self {
        debug_assert!(values.iter().all(|v| v.is_finite() && *v >= 0.0), "{kind:?}: {values:?}");
        SignalSeries { kind, values }
    }

    pub fn zeros(kind: SignalKind, len: usize) -> Self {
        SignalSeries {
            kind,
            values: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Writes the per-gap signal table as CSV.
pub fn signals_csv(s1: &SignalSeries, s2: &SignalSeries, s3: &SignalSeries, curve: &EvidenceCurve) -> String {
    let mut out = String::from("gap_index,s1_raw,s2_raw,s3_raw,s1_norm,s2_norm,s3_norm,evidence\n");
    for g in 0..curve.values.len() {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            g,
            s1.values[g],
            s2.values[g],
            s3.values[g],
            curve.components[0][g],
            curve.components[1][g],
            curve.components[2][g],
            curve.values[g]
        ));
    }
    out
}
