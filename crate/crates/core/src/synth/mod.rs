//! A hierarchical generative oracle with planted scale boundaries.
//!
//! Three pieces of ground truth live here:
//!
//! * [`generate_dump`] writes a layer dump whose representation, probe and
//!   attention structure changes abruptly at two chosen layers;
//! * [`analytic_elbo`] evaluates the per-scale ELBO of a conjugate
//!   linear-Gaussian chain, where every term has a closed form to compare with;
//! * [`exact_mi_curve`] and [`fisher_sensitivity_check`] give an exactly
//!   enumerable information curve and a noise-sensitivity identity.

mod elbo;
mod fisher;
mod generate;
mod mi;

pub use elbo::{analytic_elbo, elbo_for, ElboBreakdown, GaussianHierarchy, PosteriorChoice};
pub use fisher::{fisher_sensitivity_check, FisherChain, FisherCheck, FisherEstimate};
pub use generate::{generate_dump, generate_layers, GroundTruth, SyntheticData, GROUND_TRUTH_FILE};
pub use mi::{exact_mi_curve, mixing_channel, MiCurve, MAX_VOCAB};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::DataError;

/// Name of the model description file written next to a generated dump.
pub const SPEC_FILE: &str = "synth.json";

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic spec: {0}")]
    SpecInvalid(String),
    #[error("hierarchy is not conjugate linear-Gaussian: {0}")]
    NonConjugateSpec(String),
    #[error("vocabulary of {vocab} symbols exceeds the enumeration bound of {max}")]
    AlphabetTooLarge { vocab: usize, max: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Which block of layers a quantity refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Local,
    Intermediate,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticModelSpec {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub planted_li: usize,
    pub planted_ig: usize,
    /// Compression weights `(β_G, β_I, β_L)`.
    pub betas: [f64; 3],
    pub within_scale_noise: f64,
    /// Radians; `π/2` removes the outgoing scale entirely.
    pub boundary_rotation_angle: f64,
    pub num_sentences: usize,
    pub tokens_per_sentence: usize,
    pub rng_seed: u64,
    pub vocab_size: usize,
    /// Boundary channel mixing relative to within-scale mixing in the discrete twin.
    pub mixing_contrast: f64,
    pub attention_buckets: usize,
    /// Tokens sharing one intermediate-scale latent.
    pub phrase_length: usize,
}

impl Default for SyntheticModelSpec {
    fn default() -> Self {
        SyntheticModelSpec {
            num_layers: 16,
            hidden_dim: 12,
            planted_li: 5,
            planted_ig: 11,
            betas: [1.0, 1.0, 1.0],
            within_scale_noise: 0.02,
            boundary_rotation_angle: std::f64::consts::FRAC_PI_2,
            num_sentences: 40,
            tokens_per_sentence: 24,
            rng_seed: 0,
            vocab_size: 8,
            mixing_contrast: 10.0,
            attention_buckets: 16,
            phrase_length: 4,
        }
    }
}

impl SyntheticModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(SynthError::SpecInvalid(m));
        if !(0 < self.planted_li && self.planted_li < self.planted_ig && self.planted_ig < self.num_layers) {
            return bad(format!(
                "need 0 < planted_li ({}) < planted_ig ({}) < num_layers ({})",
                self.planted_li, self.planted_ig, self.num_layers
            ));
        }
        if self.betas.iter().any(|b| !(*b > 0.0) || !b.is_finite()) {
            return bad(format!("betas must be positive, got {:?}", self.betas));
        }
        if self.hidden_dim < 3 {
            return bad(format!("hidden_dim {} cannot hold three scale blocks", self.hidden_dim));
        }
        if !(self.within_scale_noise >= 0.0) || !self.within_scale_noise.is_finite() {
            return bad(format!("within_scale_noise must be a finite non-negative number, got {}", self.within_scale_noise));
        }
        if !self.boundary_rotation_angle.is_finite() {
            return bad("boundary_rotation_angle must be finite".into());
        }
        if self.num_sentences == 0 || self.tokens_per_sentence == 0 || self.phrase_length == 0 {
            return bad("sentence, token and phrase counts must be positive".into());
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} must be at least 2", self.vocab_size));
        }
        if !(self.mixing_contrast >= 0.0) || !self.mixing_contrast.is_finite() {
            return bad(format!("mixing_contrast must be non-negative, got {}", self.mixing_contrast));
        }
        if self.attention_buckets < 2 {
            return bad("attention_buckets must be at least 2".into());
        }
        Ok(())
    }

    /// The scale that layer `layer` belongs to.
    pub fn scale_of(&self, layer: usize) -> Scale {
        if layer < self.planted_li {
            Scale::Local
        } else if layer < self.planted_ig {
            Scale::Intermediate
        } else {
            Scale::Global
        }
    }

    /// Layer indices making up `scale`.
    pub fn scale_layers(&self, scale: Scale) -> Vec<usize> {
        (0..self.num_layers).filter(|&l| self.scale_of(l) == scale).collect()
    }

    pub fn beta(&self, scale: Scale) -> f64 {
        match scale {
            Scale::Global => self.betas[0],
            Scale::Intermediate => self.betas[1],
            Scale::Local => self.betas[2],
        }
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let spec = Self::from_json(&text).map_err(|source| SynthError::Json {
            path: path.display().to_string(),
            source,
        })?;
        spec.validate()?;
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_spec_is_valid_and_partitions_layers() {
        let s = SyntheticModelSpec::default();
        s.validate().unwrap();
        assert_eq!(s.scale_layers(Scale::Local), (0..5).collect::<Vec<_>>());
        assert_eq!(s.scale_layers(Scale::Intermediate), (5..11).collect::<Vec<_>>());
        assert_eq!(s.scale_layers(Scale::Global), (11..16).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_specs_rejected() {
        let base = SyntheticModelSpec::default();
        for s in [
            SyntheticModelSpec { planted_li: 0, ..base.clone() },
            SyntheticModelSpec { planted_ig: 5, ..base.clone() },
            SyntheticModelSpec { planted_ig: 16, ..base.clone() },
            SyntheticModelSpec { betas: [1.0, 0.0, 1.0], ..base.clone() },
            SyntheticModelSpec { hidden_dim: 2, ..base.clone() },
        ] {
            assert!(matches!(s.validate(), Err(SynthError::SpecInvalid(_))), "{s:?}");
        }
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let s = SyntheticModelSpec::default();
        let text = serde_json::to_string(&s).unwrap();
        assert_eq!(SyntheticModelSpec::from_json(&text).unwrap(), s);
        let partial = SyntheticModelSpec::from_json(r#"{"num_layers": 20, "planted_ig": 15}"#).unwrap();
        assert_eq!(partial.num_layers, 20);
        assert_eq!(partial.hidden_dim, 12);
        assert!(SyntheticModelSpec::from_json(r#"{"num_layer": 20}"#).is_err());
    }
}
