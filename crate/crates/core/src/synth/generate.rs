//! Synthetic layer dumps with planted boundaries.
//!
//! Each token carries three latent blocks of `hidden_dim / 3` coordinates:
//! a local block drawn per token, an intermediate block shared across a
//! phrase, and a global block shared across the sentence. Layer 0 is the
//! concatenation of the blocks. Every later layer applies a near-identity
//! random rotation plus Gaussian noise. Entering `planted_li` the local block
//! (wherever the accumulated rotation has carried it) is turned by the
//! boundary angle out of the retained span, which amounts to scaling it by
//! the cosine of that angle; entering `planted_ig` the same happens to the
//! intermediate block.
//!
//! Probe labels are the signs of the first local and first intermediate
//! coordinate, so each task becomes undecodable once its block is removed.
//! Attention profiles are discretized Gaussian bumps whose centre moves by
//! a fixed fraction of the bucket range, times the sine of the boundary
//! angle, at each boundary.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Result, Scale, SynthError, SyntheticModelSpec, SPEC_FILE};
use crate::dataio::{offsets_from_counts, AttentionSummary, DumpManifest, DumpWriter, LayerActivations, ProbeLabels};

pub const GROUND_TRUTH_FILE: &str = "ground_truth.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub planted_li: usize,
    pub planted_ig: usize,
}

/// In-memory form of a generated dump.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub layers: Vec<LayerActivations>,
    pub attention: Vec<AttentionSummary>,
    pub labels: Vec<ProbeLabels>,
    pub token_counts: Vec<usize>,
}

/// Column ranges of the local, intermediate and global blocks.
fn blocks(hidden_dim: usize) -> [std::ops::Range<usize>; 3] {
    let b = hidden_dim / 3;
    let local = hidden_dim - 2 * b;
    [0..local, local..local + b, local + b..hidden_dim]
}

/// A product of `d` random Givens rotations with angles drawn from `N(0, spread²)`.
fn random_near_identity(d: usize, spread: f64, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut r = Array2::<f64>::eye(d);
    if spread == 0.0 {
        return r;
    }
    let angle = Normal::new(0.0, spread).expect("finite spread");
    for _ in 0..d {
        let i = rng.random_range(0..d);
        let mut j = rng.random_range(0..d - 1);
        if j >= i {
            j += 1;
        }
        let a: f64 = angle.sample(rng);
        let (s, c) = a.sin_cos();
        // r <- G r, G acting on rows i and j.
        let ri = r.row(i).to_owned();
        let rj = r.row(j).to_owned();
        r.row_mut(i).assign(&(&ri * c - &rj * s));
        r.row_mut(j).assign(&(&ri * s + &rj * c));
    }
    r
}

fn attention_profile(buckets: usize, centre: f64) -> Vec<f64> {
    let width = (buckets as f64 / 10.0).max(0.5);
    let mut p: Vec<f64> = (0..buckets)
        .map(|b| (-(b as f64 - centre).powi(2) / (2.0 * width * width)).exp() + 1e-3)
        .collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    p
}

fn to_f32_distribution(p: &[f64]) -> Vec<f32> {
    let mut q: Vec<f32> = p.iter().map(|&v| v as f32).collect();
    // Push the f32 rounding residue into the largest entry.
    let residue = 1.0 - q.iter().map(|&v| v as f64).sum::<f64>();
    let imax = (0..q.len()).max_by(|&a, &b| q[a].total_cmp(&q[b])).unwrap_or(0);
    q[imax] += residue as f32;
    q
}

/// Generates every array of a synthetic dump without touching the disk.
pub fn generate_layers(spec: &SyntheticModelSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let d = spec.hidden_dim;
    let [local, inter, global] = blocks(d);
    let token_counts = vec![spec.tokens_per_sentence; spec.num_sentences];
    let offsets = offsets_from_counts(&token_counts);
    let n = spec.num_sentences * spec.tokens_per_sentence;

    let mut z = Array2::<f64>::zeros((n, d));
    for s in 0..spec.num_sentences {
        let g: Vec<f64> = global.clone().map(|_| rng.sample(StandardNormal)).collect();
        let mut phrase: Vec<f64> = Vec::new();
        for t in 0..spec.tokens_per_sentence {
            if t % spec.phrase_length == 0 {
                phrase = inter.clone().map(|_| rng.sample(StandardNormal)).collect();
            }
            let row = offsets[s] + t;
            for c in local.clone() {
                z[[row, c]] = rng.sample(StandardNormal);
            }
            for (k, c) in inter.clone().enumerate() {
                z[[row, c]] = phrase[k];
            }
            for (k, c) in global.clone().enumerate() {
                z[[row, c]] = g[k];
            }
        }
    }
    let labels = vec![
        ProbeLabels::new("local", z.column(local.start).iter().map(|&v| (v > 0.0) as u32).collect(), 2)?,
        ProbeLabels::new("intermediate", z.column(inter.start).iter().map(|&v| (v > 0.0) as u32).collect(), 2)?,
    ];

    let noise_std = spec.within_scale_noise;
    let spread = spec.within_scale_noise * std::f64::consts::PI;
    let keep = spec.boundary_rotation_angle.cos();
    let add_noise = |h: &mut Array2<f64>, rng: &mut ChaCha8Rng| {
        if noise_std > 0.0 {
            h.mapv_inplace(|v| v + noise_std * rng.sample::<f64, _>(StandardNormal));
        }
    };

    let mut h = z;
    add_noise(&mut h, &mut rng);
    // Columns of `q` span the current image of each latent block.
    let mut q = Array2::<f64>::eye(d);
    let mut hidden = vec![h.clone()];
    for layer in 1..spec.num_layers {
        let mut map = Array2::<f64>::eye(d);
        let outgoing = if layer == spec.planted_li {
            Some(local.clone())
        } else if layer == spec.planted_ig {
            Some(inter.clone())
        } else {
            None
        };
        if let Some(block) = outgoing {
            // Q S Qᵀ with S = cos(angle) on the outgoing block, 1 elsewhere.
            let mut s = Array2::<f64>::eye(d);
            for c in block {
                s[[c, c]] = keep;
            }
            map = q.dot(&s).dot(&q.t());
        }
        let rot = random_near_identity(d, spread, &mut rng);
        map = rot.dot(&map);
        q = rot.dot(&q);
        h = h.dot(&map.t());
        add_noise(&mut h, &mut rng);
        hidden.push(h.clone());
    }

    let layers = hidden
        .into_iter()
        .enumerate()
        .map(|(i, m)| LayerActivations::new(i, m.mapv(|v| v as f32), offsets.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;

    let b = spec.attention_buckets;
    let shift = 0.3 * b as f64 * spec.boundary_rotation_angle.sin().abs();
    let jitter = spec.within_scale_noise * b as f64;
    let base = 0.15 * b as f64;
    let mut attention = Vec::with_capacity(spec.num_layers);
    for layer in 0..spec.num_layers {
        let step = match spec.scale_of(layer) {
            Scale::Local => 0.0,
            Scale::Intermediate => 1.0,
            Scale::Global => 2.0,
        };
        let mut dist = Array2::<f32>::zeros((spec.num_sentences, b));
        for mut row in dist.axis_iter_mut(Axis(0)) {
            let e: f64 = rng.sample(StandardNormal);
            let p = to_f32_distribution(&attention_profile(b, base + step * shift + jitter * e));
            row.iter_mut().zip(p).for_each(|(r, v)| *r = v);
        }
        attention.push(AttentionSummary::new(layer, dist)?);
    }

    Ok(SyntheticData {
        layers,
        attention,
        labels,
        token_counts,
    })
}

/// Writes a synthetic dump plus `ground_truth.json` and `synth.json` into `root`.
pub fn generate_dump(spec: &SyntheticModelSpec, root: impl AsRef<Path>) -> Result<DumpManifest> {
    let root = root.as_ref();
    let data = generate_layers(spec)?;
    let mut header = DumpManifest::new("synthetic", spec.num_layers, spec.hidden_dim, data.token_counts.clone());
    header.capture_point = Some("synthetic hierarchy".into());
    let mut w = DumpWriter::create(root, &header)?;
    for layer in &data.layers {
        w.write_layer(layer)?;
    }
    for a in &data.attention {
        w.write_attention(a)?;
    }
    for l in &data.labels {
        w.write_labels(l)?;
    }
    let manifest = w.finish()?;
    let write_json = |name: &str, text: String| {
        let path = root.join(name);
        std::fs::write(&path, text).map_err(|source| SynthError::Io {
            path: path.display().to_string(),
            source,
        })
    };
    let truth = GroundTruth {
        planted_li: spec.planted_li,
        planted_ig: spec.planted_ig,
    };
    write_json(GROUND_TRUTH_FILE, serde_json::to_string_pretty(&truth).expect("serializes"))?;
    write_json(SPEC_FILE, serde_json::to_string_pretty(spec).expect("serializes"))?;
    Ok(manifest)
}
