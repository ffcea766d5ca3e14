//! Layer-wise probing classifiers and the probe-jump signal.
//!
//! A probe is a one-hidden-layer MLP (ReLU, softmax output, cross-entropy)
//! trained with Adam on an 80/20 sentence-level split. Its held-out macro-F1
//! is the decodability score for one task at one layer.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Result, SignalError, SignalKind, SignalSeries};
use crate::dataio::{validate_alignment, DumpManifest, LayerActivations, ProbeLabels};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub hidden_units: usize,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub held_out_fraction: f64,
    pub rng_seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden_units: 128,
            learning_rate: 1e-3,
            batch_size: 256,
            epochs: 20,
            held_out_fraction: 0.2,
            rng_seed: 0,
        }
    }
}

/// Sentence-level train/held-out split; depends only on the count and seed.
pub fn split_sentences(num_sentences: usize, held_out_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..num_sentences).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5917));
    let held = ((num_sentences as f64 * held_out_fraction).round() as usize).clamp(1, num_sentences.saturating_sub(1).max(1));
    let mut held_out = order[..held].to_vec();
    let mut train = order[held..].to_vec();
    held_out.sort_unstable();
    train.sort_unstable();
    (train, held_out)
}

#[derive(Debug, Clone)]
pub struct FittedProbe {
    mean: Array1<f32>,
    scale: Array1<f32>,
    w1: Array2<f32>,
    b1: Array1<f32>,
    w2: Array2<f32>,
    b2: Array1<f32>,
}

impl FittedProbe {
    pub fn num_classes(&self) -> usize {
        self.b2.len()
    }

    fn logits(&self, x: ArrayView2<f32>) -> (Array2<f32>, Array2<f32>) {
        let z = (&x - &self.mean) / &self.scale;
        let mut h = z.dot(&self.w1) + &self.b1;
        h.mapv_inplace(|v| v.max(0.0));
        let o = h.dot(&self.w2) + &self.b2;
        (h, o)
    }

    pub fn predict(&self, x: ArrayView2<f32>) -> Vec<u32> {
        let (_, o) = self.logits(x);
        o.rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (c, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ProbeOutcome {
    pub probe: FittedProbe,
    pub macro_f1: f64,
    /// Held-out sentence ids, ascending.
    pub held_out_sentences: Vec<usize>,
    /// Per held-out token: owning sentence, true label, prediction.
    pub held_out_tokens: Vec<(usize, u32, u32)>,
    pub num_classes: u32,
}

impl ProbeOutcome {
    /// Held-out macro-F1 with each token weighted by its sentence's multiplicity.
    pub fn weighted_f1(&self, sentence_weights: &[f64]) -> Option<f64> {
        let mut truth = Vec::with_capacity(self.held_out_tokens.len());
        let mut pred = Vec::with_capacity(self.held_out_tokens.len());
        let mut w = Vec::with_capacity(self.held_out_tokens.len());
        for &(s, t, p) in &self.held_out_tokens {
            let ws = sentence_weights[s];
            if ws > 0.0 {
                truth.push(t);
                pred.push(p);
                w.push(ws);
            }
        }
        if w.is_empty() {
            return None;
        }
        Some(macro_f1_weighted(&truth, &pred, &w, self.num_classes as usize))
    }
}

/// Macro-averaged F1 over classes that appear in either truth or prediction.
/// A class that is never predicted scores zero.
pub fn macro_f1(truth: &[u32], pred: &[u32], num_classes: usize) -> f64 {
    macro_f1_weighted(truth, pred, &vec![1.0; truth.len()], num_classes)
}

fn macro_f1_weighted(truth: &[u32], pred: &[u32], weights: &[f64], num_classes: usize) -> f64 {
    let mut tp = vec![0.0; num_classes];
    let mut fp = vec![0.0; num_classes];
    let mut fn_ = vec![0.0; num_classes];
    for ((&t, &p), &w) in truth.iter().zip(pred).zip(weights) {
        if t == p {
            tp[t as usize] += w;
        } else {
            fp[p as usize] += w;
            fn_[t as usize] += w;
        }
    }
    let mut sum = 0.0;
    let mut present = 0usize;
    for c in 0..num_classes {
        let denom = 2.0 * tp[c] + fp[c] + fn_[c];
        if denom > 0.0 {
            present += 1;
            sum += 2.0 * tp[c] / denom;
        }
    }
    if present == 0 {
        0.0
    } else {
        sum / present as f64
    }
}

fn gather_rows(layer: &LayerActivations, sentences: &[usize]) -> Vec<usize> {
    let offs = &layer.sentence_offsets;
    sentences.iter().flat_map(|&s| offs[s]..offs[s + 1]).collect()
}

/// Trains one probe; deterministic given `cfg.rng_seed`.
///
/// Non-convergence is not an error: the achieved held-out F1 is reported.
pub fn train_probe(features: &LayerActivations, labels: &ProbeLabels, cfg: &ProbeConfig) -> Result<ProbeOutcome> {
    let header = DumpManifest::new(
        "",
        1,
        features.hidden_dim(),
        features.sentence_offsets.windows(2).map(|w| w[1] - w[0]).collect(),
    );
    validate_alignment(&header, labels)?;
    if cfg.batch_size == 0 || cfg.hidden_units == 0 {
        return Err(SignalError::InvalidConfig("probe batch size and width must be positive".into()));
    }
    let num_classes = labels.num_classes as usize;
    let (train_s, held_s) = split_sentences(features.num_sentences(), cfg.held_out_fraction, cfg.rng_seed);
    let train_rows = gather_rows(features, &train_s);
    let y_train: Vec<u32> = train_rows.iter().map(|&r| labels.labels[r]).collect();
    {
        let mut seen = vec![false; num_classes];
        y_train.iter().for_each(|&c| seen[c as usize] = true);
        if seen.iter().filter(|&&b| b).count() < 2 {
            return Err(SignalError::SingleClassSplit);
        }
    }
    let x_train = features.matrix.select(Axis(0), &train_rows);
    let d = x_train.ncols();

    let mean = x_train.mean_axis(Axis(0)).expect("non-empty training split");
    let scale = x_train
        .var_axis(Axis(0), 0.0)
        .mapv(|v| if v > 1e-12 { v.sqrt() } else { 1.0 });

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let h = cfg.hidden_units;
    let bound1 = 1.0 / (d as f32).sqrt();
    let bound2 = 1.0 / (h as f32).sqrt();
    let mut probe = FittedProbe {
        mean,
        scale,
        w1: Array2::from_shape_fn((d, h), |_| rng.random_range(-bound1..bound1)),
        b1: Array1::from_shape_fn(h, |_| rng.random_range(-bound1..bound1)),
        w2: Array2::from_shape_fn((h, num_classes), |_| rng.random_range(-bound2..bound2)),
        b2: Array1::from_shape_fn(num_classes, |_| rng.random_range(-bound2..bound2)),
    };
    let mut adam = Adam::new(&probe, cfg.learning_rate);

    let n = x_train.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let xb = x_train.select(Axis(0), batch);
            let (hid, logits) = probe.logits(xb.view());
            // Softmax cross-entropy gradient w.r.t. logits.
            let mut g = logits;
            let bsz = batch.len() as f32;
            for (mut row, &i) in g.rows_mut().into_iter().zip(batch) {
                let max = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
                row.mapv_inplace(|v| (v - max).exp());
                let sum = row.sum();
                row.mapv_inplace(|v| v / sum);
                row[y_train[i] as usize] -= 1.0;
                row.mapv_inplace(|v| v / bsz);
            }
            let gw2 = hid.t().dot(&g);
            let gb2 = g.sum_axis(Axis(0));
            let mut gh = g.dot(&probe.w2.t());
            gh.zip_mut_with(&hid, |a, &hv| {
                if hv <= 0.0 {
                    *a = 0.0
                }
            });
            let z = (&xb - &probe.mean) / &probe.scale;
            let gw1 = z.t().dot(&gh);
            let gb1 = gh.sum_axis(Axis(0));
            adam.step(&mut probe, gw1, gb1, gw2, gb2);
        }
    }

    let held_rows = gather_rows(features, &held_s);
    let preds = probe.predict(features.matrix.select(Axis(0), &held_rows).view());
    let mut held_out_tokens = Vec::with_capacity(held_rows.len());
    let mut k = 0;
    for &s in &held_s {
        for r in features.sentence_offsets[s]..features.sentence_offsets[s + 1] {
            held_out_tokens.push((s, labels.labels[r], preds[k]));
            k += 1;
        }
    }
    let truth: Vec<u32> = held_out_tokens.iter().map(|t| t.1).collect();
    let f1 = macro_f1(&truth, &preds, num_classes);
    Ok(ProbeOutcome {
        probe,
        macro_f1: f1,
        held_out_sentences: held_s,
        held_out_tokens,
        num_classes: labels.num_classes,
    })
}

struct Adam {
    lr: f32,
    t: i32,
    m: [Vec<f32>; 4],
    v: [Vec<f32>; 4],
}

impl Adam {
    const BETA1: f32 = 0.9;
    const BETA2: f32 = 0.999;
    const EPS: f32 = 1e-8;

    fn new(p: &FittedProbe, lr: f32) -> Self {
        let sizes = [p.w1.len(), p.b1.len(), p.w2.len(), p.b2.len()];
        Adam {
            lr,
            t: 0,
            m: sizes.map(|n| vec![0.0; n]),
            v: sizes.map(|n| vec![0.0; n]),
        }
    }

    fn step(&mut self, p: &mut FittedProbe, gw1: Array2<f32>, gb1: Array1<f32>, gw2: Array2<f32>, gb2: Array1<f32>) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        let lr = self.lr;
        let update = |params: &mut [f32], grads: &[f32], m: &mut [f32], v: &mut [f32]| {
            for i in 0..params.len() {
                let g = grads[i];
                m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                params[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
            }
        };
        let [m0, m1, m2, m3] = &mut self.m;
        let [v0, v1, v2, v3] = &mut self.v;
        update(p.w1.as_slice_mut().unwrap(), gw1.as_slice().unwrap(), m0, v0);
        update(p.b1.as_slice_mut().unwrap(), gb1.as_slice().unwrap(), m1, v1);
        update(p.w2.as_slice_mut().unwrap(), gw2.as_slice().unwrap(), m2, v2);
        update(p.b2.as_slice_mut().unwrap(), gb2.as_slice().unwrap(), m3, v3);
    }
}

/// `S2(ℓ) = |P(ℓ+1) − P(ℓ)| / P(ℓ)`.
pub fn probe_jump_signal(per_layer_scores: &[f64]) -> Result<SignalSeries> {
    if per_layer_scores.len() < 2 {
        return Err(SignalError::TooFewLayers(per_layer_scores.len()));
    }
    if let Some((layer, &score)) = per_layer_scores.iter().enumerate().find(|(_, &p)| !(p > 0.0)) {
        return Err(SignalError::NonPositiveScore { layer, score });
    }
    Ok(SignalSeries::new(
        SignalKind::ProbeJump,
        per_layer_scores.windows(2).map(|w| (w[1] - w[0]).abs() / w[0]).collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::offsets_from_counts;
    use rand_distr::StandardNormal;

    fn blobs(n_sent: usize, per: usize, sep: f32, seed: u64, shuffle_labels: bool) -> (LayerActivations, ProbeLabels) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = n_sent * per;
        let mut labels: Vec<u32> = (0..n).map(|i| (i % 2) as u32).collect();
        let x = Array2::from_shape_fn((n, 6), |(i, j)| {
            let centre = if j == 0 { sep * (labels[i] as f32 * 2.0 - 1.0) } else { 0.0 };
            centre + rng.sample::<f32, _>(StandardNormal)
        });
        if shuffle_labels {
            labels.shuffle(&mut rng);
        }
        let layer = LayerActivations::new(0, x, offsets_from_counts(&vec![per; n_sent])).unwrap();
        (layer, ProbeLabels::new("t", labels, 2).unwrap())
    }

    #[test]
    fn separable_blobs_are_decoded() {
        let (x, y) = blobs(50, 20, 6.0, 1, false);
        let out = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert!(out.macro_f1 >= 0.99, "{}", out.macro_f1);
    }

    #[test]
    fn shuffled_labels_are_chance() {
        let (x, y) = blobs(50, 20, 0.0, 2, true);
        let out = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert!((0.4..=0.6).contains(&out.macro_f1), "{}", out.macro_f1);
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs(50, 20, 1.0, 3, false);
        let cfg = ProbeConfig {
            rng_seed: 99,
            ..ProbeConfig::default()
        };
        let a = train_probe(&x, &y, &cfg).unwrap().macro_f1;
        let b = train_probe(&x, &y, &cfg).unwrap().macro_f1;
        assert!((a - b).abs() <= 1e-9);
    }

    #[test]
    fn single_class_training_split_rejected() {
        let (x, _) = blobs(10, 4, 1.0, 4, false);
        let y = ProbeLabels::new("t", vec![1; 40], 2).unwrap();
        assert!(matches!(
            train_probe(&x, &y, &ProbeConfig::default()),
            Err(SignalError::SingleClassSplit)
        ));
    }

    #[test]
    fn misaligned_labels_rejected() {
        let (x, _) = blobs(10, 4, 1.0, 4, false);
        let y = ProbeLabels::new("t", vec![0, 1, 0], 2).unwrap();
        assert!(matches!(train_probe(&x, &y, &ProbeConfig::default()), Err(SignalError::Data(_))));
    }

    #[test]
    fn macro_f1_by_hand() {
        // class 0: tp 1, fp 2, fn 1 -> 0.4; class 1: tp 1, fp 1, fn 1 -> 0.5; class 2: fn 1 -> 0
        let truth = [0, 0, 1, 1, 2];
        let pred = [0, 1, 1, 0, 0];
        let f = macro_f1(&truth, &pred, 3);
        assert!((f - (0.4 + 0.5 + 0.0) / 3.0).abs() < 1e-12);
        assert_eq!(macro_f1(&[1, 1], &[1, 1], 4), 1.0);
    }

    #[test]
    fn probe_jump_values() {
        assert_eq!(probe_jump_signal(&[0.7, 0.7, 0.7]).unwrap().values, vec![0.0, 0.0]);
        assert_eq!(probe_jump_signal(&[0.5, 0.75]).unwrap().values, vec![0.5]);
        assert!(matches!(
            probe_jump_signal(&[0.5, 0.0, 0.2]),
            Err(SignalError::NonPositiveScore { layer: 1, .. })
        ));
    }

    #[test]
    fn split_is_stable_and_disjoint() {
        let (tr, ho) = split_sentences(40, 0.2, 5);
        assert_eq!(ho.len(), 8);
        assert_eq!(tr.len(), 32);
        assert!(ho.iter().all(|s| !tr.contains(s)));
        assert_eq!((tr.clone(), ho.clone()), split_sentences(40, 0.2, 5));
    }
}
