use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{GenerationCorpus, InterventionError, Result};

/// Above this many samples each hypothesis sees a seeded random subset of references.
pub const SELF_BLEU_MAX_REFERENCES: usize = 200;

type Counts<'a> = HashMap<&'a [u32], u32>;

fn ngram_counts(ids: &[u32], n: usize) -> Counts<'_> {
    let mut m = HashMap::new();
    if ids.len() >= n {
        for w in ids.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn sentence_bleu(hyp: usize, refs: &[usize], lens: &[usize], counts: &[Vec<Counts<'_>>], max_n: usize) -> f64 {
    let c = lens[hyp];
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for n in 1..=max_n {
        let hyp_counts = &counts[hyp][n - 1];
        let total: u32 = hyp_counts.values().sum();
        if total == 0 {
            continue;
        }
        let mut matched = 0u32;
        for (gram, &h) in hyp_counts {
            let best = refs.iter().filter_map(|&r| counts[r][n - 1].get(gram)).copied().max().unwrap_or(0);
            matched += h.min(best);
        }
        let p = if matched == 0 {
            1.0 / (total as f64 + 1.0)
        } else {
            matched as f64 / total as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    // closest reference length, shorter one on ties
    let r = refs
        .iter()
        .map(|&j| lens[j])
        .min_by_key(|&l| (l.abs_diff(c), l))
        .expect("at least one reference");
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * (log_sum / orders as f64).exp()
}

/// BLEU of every sample against the rest of the corpus.
///
/// Token sequences are compared after mapping to integer ids. Order is
/// canonicalized by sorting the token sequences, so the result does not
/// depend on the sample order even when references are subsampled.
pub fn self_bleu_per_sample(corpus: &GenerationCorpus, max_n: usize, seed: u64) -> Result<Vec<f64>> {
    let n = corpus.samples.len();
    if n < 2 {
        return Err(InterventionError::TooFewSamples { min: 2, actual: n });
    }
    if let Some(i) = corpus.samples.iter().position(|s| s.tokens.is_empty()) {
        return Err(InterventionError::EmptySample(i));
    }
    let max_n = max_n.max(1);
    let mut vocab: HashMap<&str, u32> = HashMap::new();
    let ids: Vec<Vec<u32>> = corpus
        .samples
        .iter()
        .map(|s| {
            s.tokens
                .iter()
                .map(|t| {
                    let next = vocab.len() as u32;
                    *vocab.entry(t.as_str()).or_insert(next)
                })
                .collect()
        })
        .collect();
    let lens: Vec<usize> = ids.iter().map(Vec::len).collect();
    let counts: Vec<Vec<Counts<'_>>> = ids.iter().map(|s| (1..=max_n).map(|k| ngram_counts(s, k)).collect()).collect();

    let mut canonical: Vec<usize> = (0..n).collect();
    canonical.sort_by(|&a, &b| corpus.samples[a].tokens.cmp(&corpus.samples[b].tokens));

    let mut scores = vec![0.0; n];
    let computed: Vec<(usize, f64)> = canonical
        .par_iter()
        .enumerate()
        .map(|(pos, &hyp)| {
            let refs: Vec<usize> = if n - 1 <= SELF_BLEU_MAX_REFERENCES {
                canonical.iter().copied().filter(|&j| j != hyp).collect()
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(pos as u64);
                rand::seq::index::sample(&mut rng, n - 1, SELF_BLEU_MAX_REFERENCES)
                    .into_iter()
                    .map(|k| canonical[if k >= pos { k + 1 } else { k }])
                    .collect()
            };
            (hyp, sentence_bleu(hyp, &refs, &lens, &counts, max_n))
        })
        .collect();
    for (i, s) in computed {
        scores[i] = s;
    }
    Ok(scores)
}

pub fn self_bleu(corpus: &GenerationCorpus, max_n: usize, seed: u64) -> Result<f64> {
    let each = self_bleu_per_sample(corpus, max_n, seed)?;
    Ok(each.iter().sum::<f64>() / each.len() as f64)
}

/// Squared deviation of each sample's token count from the corpus mean.
pub fn length_variance_per_sample(corpus: &GenerationCorpus) -> Result<Vec<f64>> {
    let n = corpus.samples.len();
    if n < 2 {
        return Err(InterventionError::TooFewSamples { min: 2, actual: n });
    }
    let lens: Vec<f64> = corpus.samples.iter().map(|s| s.tokens.len() as f64).collect();
    let mean = lens.iter().sum::<f64>() / n as f64;
    Ok(lens.iter().map(|l| (l - mean).powi(2)).collect())
}

/// Population variance of per-sample token counts.
pub fn length_variance(corpus: &GenerationCorpus) -> Result<f64> {
    let d = length_variance_per_sample(corpus)?;
    Ok(d.iter().sum::<f64>() / d.len() as f64)
}

/// Distinct token types over total tokens, pooled across the corpus.
pub fn ttr(corpus: &GenerationCorpus) -> Result<f64> {
    let total = corpus.total_tokens();
    if total == 0 {
        return Err(InterventionError::EmptyCorpus);
    }
    let mut types: Vec<&str> = corpus.samples.iter().flat_map(|s| s.tokens.iter().map(String::as_str)).collect();
    types.sort_unstable();
    types.dedup();
    Ok(types.len() as f64 / total as f64)
}

/// Per-sample type-token ratio (zero for an empty sample).
pub fn ttr_per_sample(corpus: &GenerationCorpus) -> Vec<f64> {
    corpus
        .samples
        .iter()
        .map(|s| {
            if s.tokens.is_empty() {
                return 0.0;
            }
            let mut t: Vec<&String> = s.tokens.iter().collect();
            t.sort_unstable();
            t.dedup();
            t.len() as f64 / s.tokens.len() as f64
        })
        .collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

/// Mean consecutive-sentence cosine per sample; `None` for samples with fewer than two sentences.
///
/// All embeddings across the corpus must share one dimension, taken from the
/// first embedding seen.
pub fn coherence_per_sample(embeddings: &[Vec<Vec<f64>>]) -> Result<Vec<Option<f64>>> {
    let dim = embeddings.iter().flatten().map(Vec::len).next();
    let mut out = Vec::with_capacity(embeddings.len());
    for (i, sample) in embeddings.iter().enumerate() {
        for e in sample {
            if Some(e.len()) != dim {
                return Err(InterventionError::DimensionMismatch {
                    sample: i,
                    expected: dim.unwrap_or(0),
                    actual: e.len(),
                });
            }
        }
        if sample.len() < 2 {
            log::debug!("sample {i}: single sentence, skipped for coherence");
            out.push(None);
            continue;
        }
        let sims: f64 = sample.windows(2).map(|w| cosine(&w[0], &w[1])).sum();
        out.push(Some(sims / (sample.len() - 1) as f64));
    }
    Ok(out)
}

/// Mean over samples of [`coherence_per_sample`]; `None` if every sample was skipped.
pub fn coherence(embeddings: &[Vec<Vec<f64>>]) -> Result<Option<f64>> {
    let present: Vec<f64> = coherence_per_sample(embeddings)?.into_iter().flatten().collect();
    Ok((!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64))
}
