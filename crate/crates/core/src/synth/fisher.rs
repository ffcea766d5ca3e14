//! Noise sensitivity of a smooth layer chain against its Fisher traces.
//!
//! The chain is `h⁽⁰⁾ ~ N(0, I)`, `h⁽ℓ⁺¹⁾ = tanh(A_ℓ h⁽ℓ⁾)`, with a Gaussian
//! readout `x ~ N(W h⁽ᴸ⁻¹⁾, s² I)`. Injecting `σ ε` into every layer of a
//! set `T` raises the expected negative log-likelihood
//! `J(σ²) = −E log p(x | perturbed h)` by `½ σ² Σ_{ℓ∈T} tr F⁽ℓ⁾ + O(σ⁴)`,
//! where `F⁽ℓ⁾` is the Fisher information of `x` about `h⁽ℓ⁾`.
//!
//! The left side is a finite difference of `J` estimated with antithetic
//! noise pairs; the right side comes from squared score norms obtained by
//! backpropagating the readout score. The two estimates use independent draws.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Result, Scale, SynthError, SyntheticModelSpec};

const MC_CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct FisherChain {
    /// `A_ℓ` maps layer `ℓ` to `ℓ + 1`; empty for a single-layer chain.
    pub transitions: Vec<Array2<f64>>,
    pub readout: Array2<f64>,
    pub readout_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherEstimate {
    /// `tr F⁽ℓ⁾` for every layer.
    pub traces: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub mc_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FisherCheck {
    pub layers: Vec<usize>,
    /// Finite-difference `dJ/dσ²` at the smallest positive grid value.
    pub lhs: f64,
    pub lhs_std_error: f64,
    /// `½ Σ_{ℓ∈layers} tr F⁽ℓ⁾`.
    pub rhs: f64,
    pub rhs_std_error: f64,
    /// `(σ², (J(σ²) − J(0)) / σ²)` for each positive grid value.
    pub slopes: Vec<(f64, f64)>,
    pub fisher: FisherEstimate,
}

fn matvec(m: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    m.rows().into_iter().map(|r| r.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn matvec_t(m: &Array2<f64>, v: &[f64]) -> Vec<f64> {
    (0..m.ncols()).map(|j| m.column(j).iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

impl FisherChain {
    /// A chain with `num_layers` layers of width `dim`; weights drawn with `seed`.
    pub fn random(num_layers: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.2 / (dim as f64).sqrt();
        let mut mat = |r: usize, c: usize| Array2::from_shape_fn((r, c), |_| scale * rng.sample::<f64, _>(StandardNormal));
        let transitions = (1..num_layers).map(|_| mat(dim, dim)).collect();
        let readout = mat(dim, dim);
        FisherChain {
            transitions,
            readout,
            readout_std: 0.5,
        }
    }

    /// One layer observed directly: `x ~ N(h, s² I)`.
    pub fn gaussian_readout(dim: usize, readout_std: f64) -> Self {
        FisherChain {
            transitions: Vec::new(),
            readout: Array2::eye(dim),
            readout_std,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.transitions.len() + 1
    }

    pub fn dim(&self) -> usize {
        self.readout.ncols()
    }

    /// Hidden states from `h0`, adding `noise[ℓ]` (if any) to layer `ℓ` before it propagates.
    fn forward(&self, h0: &[f64], noise: &[Option<Vec<f64>>]) -> Vec<Vec<f64>> {
        let mut hs = Vec::with_capacity(self.num_layers());
        let mut h = h0.to_vec();
        for l in 0..self.num_layers() {
            if let Some(Some(e)) = noise.get(l) {
                h.iter_mut().zip(e).for_each(|(a, b)| *a += b);
            }
            hs.push(h.clone());
            if l < self.transitions.len() {
                h = matvec(&self.transitions[l], &h).into_iter().map(f64::tanh).collect();
            }
        }
        hs
    }

    fn log_lik(&self, x: &[f64], top: &[f64]) -> f64 {
        let s2 = self.readout_std * self.readout_std;
        let mean = matvec(&self.readout, top);
        -x.iter().zip(&mean).map(|(a, m)| (a - m) * (a - m)).sum::<f64>() / (2.0 * s2)
    }

    fn sample_x(&self, top: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mean = matvec(&self.readout, top);
        mean.iter().map(|m| m + self.readout_std * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    /// Squared norm of `∇_{h⁽ℓ⁾} log p(x | h)` for every layer.
    fn score_norms(&self, hs: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
        let s2 = self.readout_std * self.readout_std;
        let top = hs.last().expect("at least one layer");
        let resid: Vec<f64> = x.iter().zip(matvec(&self.readout, top)).map(|(a, m)| (a - m) / s2).collect();
        let mut g = matvec_t(&self.readout, &resid);
        let mut out = vec![0.0; self.num_layers()];
        for l in (0..self.num_layers()).rev() {
            out[l] = g.iter().map(|v| v * v).sum();
            if l > 0 {
                // h_l = tanh(A_{l-1} h_{l-1})
                let pre: Vec<f64> = g.iter().zip(&hs[l]).map(|(gv, hv)| gv * (1.0 - hv * hv)).collect();
                g = matvec_t(&self.transitions[l - 1], &pre);
            }
        }
        out
    }

    /// Monte-Carlo Fisher traces for every layer.
    pub fn fisher_traces(&self, mc_samples: usize, seed: u64) -> FisherEstimate {
        let d = self.dim();
        let nl = self.num_layers();
        let chunks = mc_samples.div_ceil(MC_CHUNK);
        let partial: Vec<(Vec<f64>, Vec<f64>)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2 * c as u64 + 1);
                let n = MC_CHUNK.min(mc_samples - c * MC_CHUNK);
                let (mut s, mut s2) = (vec![0.0; nl], vec![0.0; nl]);
                for _ in 0..n {
                    let h0 = normals(&mut rng, d);
                    let hs = self.forward(&h0, &[]);
                    let x = self.sample_x(hs.last().unwrap(), &mut rng);
                    for (l, v) in self.score_norms(&hs, &x).into_iter().enumerate() {
                        s[l] += v;
                        s2[l] += v * v;
                    }
                }
                (s, s2)
            })
            .collect();
        let n = mc_samples as f64;
        let mut traces = vec![0.0; nl];
        let mut std_errors = vec![0.0; nl];
        for l in 0..nl {
            let sum: f64 = partial.iter().map(|p| p.0[l]).sum();
            let sum2: f64 = partial.iter().map(|p| p.1[l]).sum();
            let mean = sum / n;
            traces[l] = mean;
            std_errors[l] = (((sum2 - n * mean * mean) / (n - 1.0)).max(0.0) / n).sqrt();
        }
        FisherEstimate {
            traces,
            std_errors,
            mc_samples,
        }
    }

    /// Antithetic estimate of `(J(σ²) − J(0)) / σ²` with noise on `layers`, plus its standard error.
    pub fn sensitivity_slope(&self, layers: &[usize], sigma2: f64, mc_samples: usize, seed: u64) -> (f64, f64) {
        let d = self.dim();
        let sigma = sigma2.sqrt();
        let chunks = mc_samples.div_ceil(MC_CHUNK);
        let partial: Vec<(f64, f64)> = (0..chunks)
            .into_par_iter()
            .map(|c| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(2 * c as u64 + 2);
                let n = MC_CHUNK.min(mc_samples - c * MC_CHUNK);
                let (mut s, mut s2) = (0.0, 0.0);
                for _ in 0..n {
                    let h0 = normals(&mut rng, d);
                    let clean = self.forward(&h0, &[]);
                    let x = self.sample_x(clean.last().unwrap(), &mut rng);
                    let base = self.log_lik(&x, clean.last().unwrap());
                    let mut plus: Vec<Option<Vec<f64>>> = vec![None; self.num_layers()];
                    let mut minus = plus.clone();
                    for &l in layers {
                        let e: Vec<f64> = normals(&mut rng, d).into_iter().map(|v| sigma * v).collect();
                        minus[l] = Some(e.iter().map(|v| -v).collect());
                        plus[l] = Some(e);
                    }
                    let jp = base - self.log_lik(&x, self.forward(&h0, &plus).last().unwrap());
                    let jm = base - self.log_lik(&x, self.forward(&h0, &minus).last().unwrap());
                    let v = 0.5 * (jp + jm) / sigma2;
                    s += v;
                    s2 += v * v;
                }
                (s, s2)
            })
            .collect();
        let (sum, sum2) = partial.iter().fold((0.0, 0.0), |a, b| (a.0 + b.0, a.1 + b.1));
        let n = mc_samples as f64;
        let mean = sum / n;
        (mean, (((sum2 - n * mean * mean) / (n - 1.0)).max(0.0) / n).sqrt())
    }

    /// Compares the finite-difference slope with half the summed Fisher traces over `layers`.
    pub fn check(&self, layers: &[usize], sigma_grid: &[f64], mc_samples: usize, seed: u64) -> Result<FisherCheck> {
        if layers.is_empty() || layers.iter().any(|&l| l >= self.num_layers()) {
            return Err(SynthError::SpecInvalid(format!("layers {layers:?} outside a {}-layer chain", self.num_layers())));
        }
        if mc_samples < 2 {
            return Err(SynthError::SpecInvalid("need at least two Monte-Carlo samples".into()));
        }
        let mut grid: Vec<f64> = sigma_grid.iter().copied().filter(|&s| s > 0.0 && s.is_finite()).collect();
        grid.sort_by(f64::total_cmp);
        if grid.is_empty() {
            return Err(SynthError::SpecInvalid("sigma grid has no positive value".into()));
        }
        let fisher = self.fisher_traces(mc_samples, seed);
        let rhs = 0.5 * layers.iter().map(|&l| fisher.traces[l]).sum::<f64>();
        // Layers share samples, so add the standard errors rather than their squares.
        let rhs_std_error = 0.5 * layers.iter().map(|&l| fisher.std_errors[l]).sum::<f64>();
        let mut slopes = Vec::with_capacity(grid.len());
        let mut lhs = (0.0, 0.0);
        for (k, &s2) in grid.iter().enumerate() {
            let est = self.sensitivity_slope(layers, s2, mc_samples, seed);
            if k == 0 {
                lhs = est;
            }
            slopes.push((s2, est.0));
        }
        Ok(FisherCheck {
            layers: layers.to_vec(),
            lhs: lhs.0,
            lhs_std_error: lhs.1,
            rhs,
            rhs_std_error,
            slopes,
            fisher,
        })
    }
}

/// Runs [`FisherChain::check`] on the chain described by `spec` with noise injected into `scale`.
pub fn fisher_sensitivity_check(
    spec: &SyntheticModelSpec,
    scale: Scale,
    sigma_grid: &[f64],
    mc_samples: usize,
) -> Result<FisherCheck> {
    spec.validate()?;
    let chain = FisherChain::random(spec.num_layers, spec.hidden_dim, spec.rng_seed);
    chain.check(&spec.scale_layers(scale), sigma_grid, mc_samples, spec.rng_seed)
}
