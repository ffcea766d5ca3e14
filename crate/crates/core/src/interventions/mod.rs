//! Scoring of baseline versus perturbed generation corpora.
//!
//! A [`GenerationCorpus`] is a list of generated samples tagged with the
//! scale whose activations were perturbed (or `baseline`) and the relative
//! noise level. [`score_corpus`] computes the five behavioural metrics;
//! [`intervention_report`] compares each perturbed corpus against the
//! baseline with percent deltas, paired t-tests and the local brittleness
//! coefficient.

mod grammar;
mod metrics;
mod stats;

pub use grammar::{
    grammar_error_rate, grammar_match_counts, FixtureEntry, GrammarService, HttpGrammarService, RecordingService,
    ReplayService, DEFAULT_MAX_IN_FLIGHT,
};
pub use metrics::{
    coherence, coherence_per_sample, length_variance, length_variance_per_sample, self_bleu, self_bleu_per_sample, ttr,
    ttr_per_sample, SELF_BLEU_MAX_REFERENCES,
};
pub use stats::{brittleness, paired_ttest, percent_delta, Delta, TTest, TIER3_BRITTLENESS_RATIO};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("need at least {min} samples, got {actual}")]
    TooFewSamples { min: usize, actual: usize },
    #[error("sample {0} has no tokens")]
    EmptySample(usize),
    #[error("corpus contains no tokens")]
    EmptyCorpus,
    #[error("sample {sample}: embedding dimension {actual}, expected {expected}")]
    DimensionMismatch { sample: usize, expected: usize, actual: usize },
    #[error("grammar service unavailable: {0}")]
    ServiceUnavailable(String),
    #[error("malformed grammar service response: {0}")]
    MalformedResponse(String),
    #[error("noise level must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("paired samples differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("no {0:?} corpus supplied")]
    MissingScale(ScaleTag),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {source}")]
    Json {
        path: String,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, InterventionError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTag {
    Baseline,
    Local,
    Intermediate,
    Global,
}

impl ScaleTag {
    pub const PERTURBED: [ScaleTag; 3] = [ScaleTag::Local, ScaleTag::Intermediate, ScaleTag::Global];

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleTag::Baseline => "baseline",
            ScaleTag::Local => "local",
            ScaleTag::Intermediate => "intermediate",
            ScaleTag::Global => "global",
        }
    }
}

impl std::str::FromStr for ScaleTag {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "baseline" => Ok(ScaleTag::Baseline),
            "local" => Ok(ScaleTag::Local),
            "intermediate" => Ok(ScaleTag::Intermediate),
            "global" => Ok(ScaleTag::Global),
            other => Err(format!("unknown scale tag {other:?}")),
        }
    }
}

/// Lowercases and splits into runs of alphanumerics and single punctuation marks.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_lowercase().collect());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// One JSON Lines record of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokens: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sentence_embeddings: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub text: String,
    pub tokens: Vec<String>,
    pub sentence_embeddings: Option<Vec<Vec<f64>>>,
}

impl Sample {
    /// A sample tokenized with [`tokenize`].
    pub fn from_text(text: impl Into<String>) -> Self {
        let text = text.into();
        Sample {
            tokens: tokenize(&text),
            text,
            sentence_embeddings: None,
        }
    }

    pub fn with_embeddings(mut self, embeddings: Vec<Vec<f64>>) -> Self {
        self.sentence_embeddings = Some(embeddings);
        self
    }
}

impl From<SampleRecord> for Sample {
    fn from(r: SampleRecord) -> Self {
        let tokens = r.tokens.unwrap_or_else(|| tokenize(&r.text));
        Sample {
            text: r.text,
            tokens,
            sentence_embeddings: r.sentence_embeddings,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerationCorpus {
    pub samples: Vec<Sample>,
    pub scale_tag: ScaleTag,
    /// Relative noise level; zero for the baseline.
    pub sigma: f64,
}

impl GenerationCorpus {
    pub fn new(samples: Vec<Sample>, scale_tag: ScaleTag, sigma: f64) -> Result<Self> {
        if samples.len() < 2 {
            return Err(InterventionError::TooFewSamples {
                min: 2,
                actual: samples.len(),
            });
        }
        if let Some(i) = samples.iter().position(|s| s.tokens.is_empty()) {
            return Err(InterventionError::EmptySample(i));
        }
        Ok(GenerationCorpus {
            samples,
            scale_tag,
            sigma,
        })
    }

    /// Parses JSON Lines; blank lines are skipped.
    pub fn from_jsonl(text: &str, source: &str, scale_tag: ScaleTag, sigma: f64) -> Result<Self> {
        let mut samples = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: SampleRecord = serde_json::from_str(line).map_err(|source_err| InterventionError::Json {
                path: source.to_string(),
                line: i + 1,
                source: source_err,
            })?;
            samples.push(rec.into());
        }
        Self::new(samples, scale_tag, sigma)
    }

    pub fn load(path: impl AsRef<Path>, scale_tag: ScaleTag, sigma: f64) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| InterventionError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_jsonl(&text, &path.display().to_string(), scale_tag, sigma)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for s in &self.samples {
            let rec = SampleRecord {
                text: s.text.clone(),
                tokens: Some(s.tokens.clone()),
                sentence_embeddings: s.sentence_embeddings.clone(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn total_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.tokens.len()).sum()
    }

    pub(crate) fn embeddings(&self) -> Option<Vec<Vec<Vec<f64>>>> {
        if self.samples.iter().all(|s| s.sentence_embeddings.is_none()) {
            return None;
        }
        Some(
            self.samples
                .iter()
                .map(|s| s.sentence_embeddings.clone().unwrap_or_default())
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricVector {
    pub self_bleu: f64,
    pub length_variance: f64,
    pub ttr: f64,
    pub coherence: Option<f64>,
    pub grammar_error_rate: Option<f64>,
}

/// Per-sample decompositions used for paired tests.
#[derive(Debug, Clone, PartialEq)]
pub struct PerSampleMetrics {
    pub self_bleu: Vec<f64>,
    /// Squared deviation of each sample's length from the corpus mean.
    pub length_deviation: Vec<f64>,
    pub ttr: Vec<f64>,
    pub coherence: Option<Vec<Option<f64>>>,
    /// Flagged matches per 100 tokens, per sample.
    pub grammar_error_rate: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusScores {
    pub metrics: MetricVector,
    pub per_sample: PerSampleMetrics,
    pub notes: Vec<String>,
}

/// Computes the metric vector and its per-sample decompositions.
///
/// Coherence is absent when the corpus carries no embeddings or every sample
/// has fewer than two sentences. Grammar is absent when no service is given
/// or the service is unavailable; the reason is added to `notes`.
pub fn score_corpus(corpus: &GenerationCorpus, grammar: Option<&dyn GrammarService>, seed: u64) -> Result<CorpusScores> {
    let mut notes = Vec::new();
    let bleu = self_bleu_per_sample(corpus, 4, seed)?;
    let length_deviation = length_variance_per_sample(corpus)?;
    let ttr_each = ttr_per_sample(corpus);

    let coherence_each = match corpus.embeddings() {
        None => None,
        Some(e) => Some(coherence_per_sample(&e)?),
    };
    let coherence_mean = coherence_each.as_ref().and_then(|v| {
        let present: Vec<f64> = v.iter().flatten().copied().collect();
        (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
    });

    let (grammar_rate, grammar_each) = match grammar {
        None => (None, None),
        Some(service) => match grammar_match_counts(corpus, service, service.max_in_flight()) {
            Ok(counts) => {
                let total: usize = counts.iter().sum();
                let rate = 100.0 * total as f64 / corpus.total_tokens() as f64;
                let each = counts
                    .iter()
                    .zip(&corpus.samples)
                    .map(|(&c, s)| 100.0 * c as f64 / s.tokens.len() as f64)
                    .collect();
                (Some(rate), Some(each))
            }
            Err(InterventionError::ServiceUnavailable(msg)) => {
                notes.push(format!("grammar_error_rate absent: service unavailable ({msg})"));
                (None, None)
            }
            Err(e) => return Err(e),
        },
    };

    let metrics = MetricVector {
        self_bleu: bleu.iter().sum::<f64>() / bleu.len() as f64,
        length_variance: length_deviation.iter().sum::<f64>() / length_deviation.len() as f64,
        ttr: ttr(corpus)?,
        coherence: coherence_mean,
        grammar_error_rate: grammar_rate,
    };
    Ok(CorpusScores {
        metrics,
        per_sample: PerSampleMetrics {
            self_bleu: bleu,
            length_deviation,
            ttr: ttr_each,
            coherence: coherence_each,
            grammar_error_rate: grammar_each,
        },
        notes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DeltaVector {
    pub self_bleu: Option<Delta>,
    pub length_variance: Option<Delta>,
    pub ttr: Option<Delta>,
    pub coherence: Option<Delta>,
    pub grammar_error_rate: Option<Delta>,
}

impl DeltaVector {
    pub fn between(baseline: &MetricVector, treated: &MetricVector) -> Self {
        let opt = |b: Option<f64>, t: Option<f64>| b.zip(t).map(|(b, t)| percent_delta(b, t));
        DeltaVector {
            self_bleu: Some(percent_delta(baseline.self_bleu, treated.self_bleu)),
            length_variance: Some(percent_delta(baseline.length_variance, treated.length_variance)),
            ttr: Some(percent_delta(baseline.ttr, treated.ttr)),
            coherence: opt(baseline.coherence, treated.coherence),
            grammar_error_rate: opt(baseline.grammar_error_rate, treated.grammar_error_rate),
        }
    }

    /// The structure delta (sentence-length variance) in percent.
    pub fn structure(&self) -> Option<f64> {
        self.length_variance.map(|d| d.value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PValues {
    pub self_bleu: Option<TTest>,
    pub length_variance: Option<TTest>,
    pub ttr: Option<TTest>,
    pub coherence: Option<TTest>,
    pub grammar_error_rate: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionReport {
    pub sigma: f64,
    /// Metric vectors by scale, including the baseline.
    pub metrics: BTreeMap<ScaleTag, MetricVector>,
    /// Percent deltas against the baseline; the baseline's own entry is all zero.
    pub deltas: BTreeMap<ScaleTag, DeltaVector>,
    /// Paired tests of each perturbed corpus against the baseline.
    pub tests: BTreeMap<ScaleTag, PValues>,
    /// `|Δ_structure^(L)| / σ`, with the delta in percent.
    pub gamma_local: Option<f64>,
    /// Scale with the largest signed structure delta.
    pub dominant_structure_scale: Option<ScaleTag>,
    pub notes: Vec<String>,
    /// Seed used for reference sampling; absent for reports built from published deltas.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl InterventionReport {
    /// A report carrying only published deltas (no raw corpora).
    pub fn from_deltas(sigma: f64, deltas: BTreeMap<ScaleTag, DeltaVector>) -> Result<Self> {
        let mut deltas = deltas;
        deltas.insert(ScaleTag::Baseline, DeltaVector::between(&ZERO_DELTA_PROBE, &ZERO_DELTA_PROBE));
        let mut r = InterventionReport {
            sigma,
            metrics: BTreeMap::new(),
            deltas,
            tests: BTreeMap::new(),
            gamma_local: None,
            dominant_structure_scale: None,
            notes: Vec::new(),
            seed: None,
        };
        r.derive_summaries()?;
        Ok(r)
    }

    /// Recomputes `gamma_local` and `dominant_structure_scale` from the deltas.
    pub fn derive_summaries(&mut self) -> Result<()> {
        self.gamma_local = match self.deltas.get(&ScaleTag::Local).and_then(DeltaVector::structure) {
            Some(d) => Some(brittleness(d, self.sigma)?),
            None => None,
        };
        self.dominant_structure_scale = ScaleTag::PERTURBED
            .iter()
            .filter_map(|s| self.deltas.get(s).and_then(DeltaVector::structure).map(|d| (*s, d)))
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .map(|(s, _)| s);
        Ok(())
    }

    pub fn structure_delta(&self, scale: ScaleTag) -> Option<f64> {
        self.deltas.get(&scale).and_then(DeltaVector::structure)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Any vector with non-zero entries; only used to materialize all-zero deltas.
const ZERO_DELTA_PROBE: MetricVector = MetricVector {
    self_bleu: 1.0,
    length_variance: 1.0,
    ttr: 1.0,
    coherence: Some(1.0),
    grammar_error_rate: Some(1.0),
};

fn paired(a: &[f64], b: &[f64]) -> Option<TTest> {
    paired_ttest(b, a).ok()
}

/// Compares every perturbed corpus in `treated` with `baseline`.
pub fn intervention_report(
    baseline: &GenerationCorpus,
    treated: &[GenerationCorpus],
    grammar: Option<&dyn GrammarService>,
    seed: u64,
) -> Result<InterventionReport> {
    let sigma = treated
        .iter()
        .map(|c| c.sigma)
        .find(|&s| s > 0.0)
        .ok_or(InterventionError::NonPositiveSigma(treated.first().map_or(0.0, |c| c.sigma)))?;
    let base = score_corpus(baseline, grammar, seed)?;
    let mut notes = base.notes.clone();
    let mut metrics = BTreeMap::from([(ScaleTag::Baseline, base.metrics)]);
    let mut deltas = BTreeMap::from([(ScaleTag::Baseline, DeltaVector::between(&base.metrics, &base.metrics))]);
    let mut tests = BTreeMap::new();
    for corpus in treated {
        if corpus.scale_tag == ScaleTag::Baseline {
            continue;
        }
        let s = score_corpus(corpus, grammar, seed)?;
        notes.extend(s.notes.iter().map(|n| format!("{}: {n}", corpus.scale_tag.as_str())));
        metrics.insert(corpus.scale_tag, s.metrics);
        deltas.insert(corpus.scale_tag, DeltaVector::between(&base.metrics, &s.metrics));
        let (b, t) = (&base.per_sample, &s.per_sample);
        let coherence = match (&b.coherence, &t.coherence) {
            (Some(x), Some(y)) if x.len() == y.len() => {
                let (xs, ys): (Vec<f64>, Vec<f64>) = x.iter().zip(y).filter_map(|(a, b)| a.zip(*b)).unzip();
                paired(&xs, &ys)
            }
            _ => None,
        };
        let grammar_test = match (&b.grammar_error_rate, &t.grammar_error_rate) {
            (Some(x), Some(y)) => paired(x, y),
            _ => None,
        };
        if baseline.len() != corpus.len() {
            notes.push(format!(
                "{}: {} samples vs {} baseline samples; paired tests skipped",
                corpus.scale_tag.as_str(),
                corpus.len(),
                baseline.len()
            ));
        }
        tests.insert(
            corpus.scale_tag,
            PValues {
                self_bleu: paired(&b.self_bleu, &t.self_bleu),
                length_variance: paired(&b.length_deviation, &t.length_deviation),
                ttr: paired(&b.ttr, &t.ttr),
                coherence,
                grammar_error_rate: grammar_test,
            },
        );
    }
    let mut report = InterventionReport {
        sigma,
        metrics,
        deltas,
        tests,
        gamma_local: None,
        dominant_structure_scale: None,
        notes,
        seed: Some(seed),
    };
    report.derive_summaries()?;
    Ok(report)
}
