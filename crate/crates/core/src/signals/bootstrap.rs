//! Full-sample detection and sentence-level bootstrap of boundary positions.
//!
//! Everything that depends on the activations is computed once into a
//! [`SentenceCache`]; a resample is then just a vector of sentence
//! multiplicities fed back through the cached aggregates.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cka::GramCache;
use super::fusion::{detect_boundaries, fuse_evidence, BoundaryPair, EvidenceCurve, FusionConfig};
use super::js::per_sentence_js;
use super::probe::{probe_jump_signal, train_probe, ProbeConfig, ProbeOutcome};
use super::{Result, SignalError, SignalKind, SignalSeries};
use crate::dataio::Dump;

/// Smallest corpus the bootstrap accepts (the resampling unit is the sentence).
pub const MIN_BOOTSTRAP_SENTENCES: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub fusion: FusionConfig,
    pub probe: ProbeConfig,
    /// Token budget for the CKA subsample.
    pub subsample: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            fusion: FusionConfig::default(),
            probe: ProbeConfig::default(),
            subsample: 8192,
        }
    }
}

/// Per-sentence aggregates for all three signals.
pub struct SentenceCache {
    num_layers: usize,
    num_sentences: usize,
    gram: GramCache,
    /// `probes[layer][task]`; empty when the dump has no labels.
    probes: Vec<Vec<ProbeOutcome>>,
    /// `js[gap][sentence]`; `None` when the dump has no attention summaries.
    js: Option<Vec<Vec<f64>>>,
}

impl SentenceCache {
    pub fn build(dump: &Dump, cfg: &DetectConfig) -> Result<Self> {
        let layers = dump.layers()?;
        if layers.len() < 2 {
            return Err(SignalError::TooFewLayers(layers.len()));
        }
        let seed = cfg.fusion.rng_seed;
        let gram = GramCache::build(&layers, cfg.subsample, seed)?;

        let mut labels = Vec::new();
        for task in dump.label_tasks() {
            labels.push(dump.labels(&task)?);
        }
        let probe_cfg = ProbeConfig {
            rng_seed: cfg.probe.rng_seed ^ seed,
            ..cfg.probe.clone()
        };
        let probes = if labels.is_empty() {
            Vec::new()
        } else {
            layers
                .par_iter()
                .map(|layer| labels.iter().map(|y| train_probe(layer, y, &probe_cfg)).collect::<Result<Vec<_>>>())
                .collect::<Result<Vec<_>>>()?
        };

        let js = if dump.has_attention() {
            Some(per_sentence_js(&dump.attention_all()?)?)
        } else {
            None
        };

        Ok(SentenceCache {
            num_layers: layers.len(),
            num_sentences: dump.num_sentences(),
            gram,
            probes,
            js,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn num_sentences(&self) -> usize {
        self.num_sentences
    }

    /// Mean held-out macro-F1 per layer on the full sample.
    pub fn probe_scores(&self) -> Vec<f64> {
        self.probes
            .iter()
            .map(|tasks| tasks.iter().map(|p| p.macro_f1).sum::<f64>() / tasks.len() as f64)
            .collect()
    }

    /// The three signals with each sentence counted `weights[s]` times.
    pub fn signals(&self, weights: &[f64]) -> Result<[SignalSeries; 3]> {
        let gaps = self.num_layers - 1;
        let s1 = self.gram.signal_weighted(weights)?;

        let s2 = if self.probes.is_empty() {
            SignalSeries::zeros(SignalKind::ProbeJump, gaps)
        } else {
            let scores: Vec<f64> = self
                .probes
                .iter()
                .map(|tasks| {
                    let sum: f64 = tasks
                        .iter()
                        .map(|p| p.weighted_f1(weights).unwrap_or(p.macro_f1))
                        .sum();
                    sum / tasks.len() as f64
                })
                .collect();
            probe_jump_signal(&scores)?
        };

        let s3 = match &self.js {
            None => SignalSeries::zeros(SignalKind::AttentionDrift, gaps),
            Some(per_gap) => {
                let total: f64 = weights.iter().sum();
                SignalSeries::new(
                    SignalKind::AttentionDrift,
                    per_gap
                        .iter()
                        .map(|g| g.iter().zip(weights).map(|(j, w)| j * w).sum::<f64>() / total)
                        .collect(),
                )
            }
        };
        Ok([s1, s2, s3])
    }

    fn detect_weighted(&self, weights: &[f64], cfg: &FusionConfig) -> Result<BoundaryPair> {
        let [s1, s2, s3] = self.signals(weights)?;
        let curve = fuse_evidence(&s1, &s2, &s3, cfg)?;
        detect_boundaries(&curve, cfg, self.num_layers)
    }
}

/// Full-sample signals, curve and (if two peaks qualify) boundaries.
#[derive(Debug)]
pub struct Detection {
    pub s1: SignalSeries,
    pub s2: SignalSeries,
    pub s3: SignalSeries,
    pub curve: EvidenceCurve,
    pub result: Result<BoundaryResult>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Acceptance {
    pub li: bool,
    pub ig: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryResult {
    pub li_layer: usize,
    pub ig_layer: usize,
    pub li_rel: f64,
    pub ig_rel: f64,
    pub li_ci: (f64, f64),
    pub ig_ci: (f64, f64),
    pub accepted: Acceptance,
    pub num_layers: usize,
    pub iterations: usize,
    pub failed_iterations: usize,
}

impl BoundaryResult {
    /// A result with no resampling behind it, such as a published pair of
    /// layers. Intervals collapse onto the point and both boundaries count as
    /// accepted.
    pub fn point(li_layer: usize, ig_layer: usize, num_layers: usize) -> Self {
        BoundaryResult {
            li_layer,
            ig_layer,
            li_rel: li_layer as f64 / num_layers as f64,
            ig_rel: ig_layer as f64 / num_layers as f64,
            li_ci: (li_layer as f64, li_layer as f64),
            ig_ci: (ig_layer as f64, ig_layer as f64),
            accepted: Acceptance { li: true, ig: true },
            num_layers,
            iterations: 0,
            failed_iterations: 0,
        }
    }

    pub fn li_ci_width(&self) -> f64 {
        self.li_ci.1 - self.li_ci.0
    }

    pub fn ig_ci_width(&self) -> f64 {
        self.ig_ci.1 - self.ig_ci.0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// Percentile interval of `sorted` at `level`, linear interpolation between order statistics.
fn percentile_interval(sorted: &[f64], level: f64) -> (f64, f64) {
    let q = |p: f64| {
        let pos = p * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
    };
    let alpha = (1.0 - level) / 2.0;
    (q(alpha), q(1.0 - alpha))
}

/// Sentence multiplicities for bootstrap iteration `iteration`.
///
/// Iteration 0 is the original sample, so a single iteration reproduces the
/// point estimate. Later iterations draw from independent ChaCha streams.
fn resample_weights(num_sentences: usize, seed: u64, iteration: usize) -> Vec<f64> {
    let mut w = vec![0.0; num_sentences];
    if iteration == 0 {
        w.iter_mut().for_each(|x| *x = 1.0);
        return w;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration as u64);
    for _ in 0..num_sentences {
        w[rng.random_range(0..num_sentences)] += 1.0;
    }
    w
}

/// A boundary is accepted when its interval is strictly narrower than the bound.
pub fn accept(width: f64, max_ci_width: f64) -> bool {
    width < max_ci_width
}

/// Bootstraps both boundaries from an already built cache.
pub fn bootstrap_from_cache(cache: &SentenceCache, cfg: &FusionConfig) -> Result<BoundaryResult> {
    cfg.validate()?;
    let n = cache.num_sentences();
    if n < MIN_BOOTSTRAP_SENTENCES {
        return Err(SignalError::TooFewSentences {
            min: MIN_BOOTSTRAP_SENTENCES,
            actual: n,
        });
    }
    let point = cache.detect_weighted(&vec![1.0; n], cfg)?;

    let draws: Vec<Option<(usize, usize)>> = (0..cfg.bootstrap_iterations)
        .into_par_iter()
        .map(|it| {
            let w = resample_weights(n, cfg.rng_seed, it);
            cache.detect_weighted(&w, cfg).ok().map(|b| (b.li_layer, b.ig_layer))
        })
        .collect();
    let failed = draws.iter().filter(|d| d.is_none()).count();
    if 2 * failed > cfg.bootstrap_iterations {
        return Err(SignalError::BootstrapInsufficientPeaks {
            failed,
            iterations: cfg.bootstrap_iterations,
            peaks: point.peaks,
        });
    }
    let mut li: Vec<f64> = draws.iter().flatten().map(|d| d.0 as f64).collect();
    let mut ig: Vec<f64> = draws.iter().flatten().map(|d| d.1 as f64).collect();
    li.sort_by(f64::total_cmp);
    ig.sort_by(f64::total_cmp);

    // The percentile interval need not contain the full-sample estimate when
    // the resampling distribution is lopsided; stretch it so that it does.
    let cover = |(lo, hi): (f64, f64), p: usize| (lo.min(p as f64), hi.max(p as f64));
    let li_ci = cover(percentile_interval(&li, cfg.ci_level), point.li_layer);
    let ig_ci = cover(percentile_interval(&ig, cfg.ci_level), point.ig_layer);
    let num_layers = cache.num_layers();
    Ok(BoundaryResult {
        li_layer: point.li_layer,
        ig_layer: point.ig_layer,
        li_rel: point.li_layer as f64 / num_layers as f64,
        ig_rel: point.ig_layer as f64 / num_layers as f64,
        li_ci,
        ig_ci,
        accepted: Acceptance {
            li: accept(li_ci.1 - li_ci.0, cfg.max_ci_width),
            ig: accept(ig_ci.1 - ig_ci.0, cfg.max_ci_width),
        },
        num_layers,
        iterations: cfg.bootstrap_iterations,
        failed_iterations: failed,
    })
}

/// Detects boundaries in a dump and bootstraps their confidence intervals.
pub fn bootstrap_boundaries(dump: &Dump, cfg: &DetectConfig) -> Result<BoundaryResult> {
    cfg.fusion.validate()?;
    if dump.num_sentences() < MIN_BOOTSTRAP_SENTENCES {
        return Err(SignalError::TooFewSentences {
            min: MIN_BOOTSTRAP_SENTENCES,
            actual: dump.num_sentences(),
        });
    }
    let cache = SentenceCache::build(dump, cfg)?;
    bootstrap_from_cache(&cache, &cfg.fusion)
}

/// Computes the signals and the evidence curve, then bootstraps the boundaries.
///
/// Signal computation errors are returned directly; detection errors (for
/// example too few peaks) are kept in [`Detection::result`] so the curve can
/// still be written out.
pub fn detect(dump: &Dump, cfg: &DetectConfig) -> Result<Detection> {
    cfg.fusion.validate()?;
    let cache = SentenceCache::build(dump, cfg)?;
    let [s1, s2, s3] = cache.signals(&vec![1.0; cache.num_sentences()])?;
    let curve = fuse_evidence(&s1, &s2, &s3, &cfg.fusion)?;
    let result = bootstrap_from_cache(&cache, &cfg.fusion);
    Ok(Detection {
        s1,
        s2,
        s3,
        curve,
        result,
    })
}
