//! Linear centered kernel alignment and the representation-change signal.
//!
//! `CKA(X, Y) = ‖XcᵀYc‖²_F / (‖XcᵀXc‖_F ‖YcᵀYc‖_F)` with `Xc`, `Yc` column-centered.
//!
//! For bootstrap resampling the same quantity is evaluated from token Gram
//! matrices aggregated to sentence blocks, so that a resample (a multiplicity
//! per sentence) can be scored without touching the activations again. See
//! [`GramCache`].

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Result, SignalError, SignalKind, SignalSeries};
use crate::dataio::LayerActivations;

/// CKA below this is treated as zero alignment.
const MIN_CKA: f64 = 1e-12;
const GRAM_BLOCK_ROWS: usize = 512;

/// Linear CKA between two representations of the same tokens.
///
/// Returns `None` when either matrix has zero variance.
pub fn linear_cka(x: ArrayView2<f32>, y: ArrayView2<f32>) -> Option<f64> {
    assert_eq!(x.nrows(), y.nrows(), "CKA needs the same tokens on both sides");
    let xc = centered(x);
    let yc = centered(y);
    let n = x.nrows();
    let (xy, xx, yy) = if x.ncols().max(y.ncols()) <= n {
        let cxy = xc.t().dot(&yc);
        let cxx = xc.t().dot(&xc);
        let cyy = yc.t().dot(&yc);
        (frob2(&cxy), frob2(&cxx), frob2(&cyy))
    } else {
        // Fewer tokens than features: ‖XᵀY‖² = ⟨XXᵀ, YYᵀ⟩.
        let k = xc.dot(&xc.t());
        let l = yc.dot(&yc.t());
        ((&k * &l).sum(), frob2(&k), frob2(&l))
    };
    if xx <= 0.0 || yy <= 0.0 {
        return None;
    }
    Some((xy / (xx.sqrt() * yy.sqrt())).min(1.0))
}

fn centered(x: ArrayView2<f32>) -> Array2<f64> {
    let mut m = x.mapv(|v| v as f64);
    let mean = m.mean_axis(Axis(0)).expect("non-empty matrix");
    m -= &mean;
    m
}

fn frob2(m: &Array2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum()
}

/// A contiguous run of rows belonging to one sentence, in subsample order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenUnit {
    pub sentence: usize,
    pub start: usize,
    pub end: usize,
}

impl TokenUnit {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

/// The first `subsample` tokens after a seeded shuffle of sentence order.
///
/// The last sentence taken may be truncated.
pub fn subsample_units(sentence_offsets: &[usize], subsample: usize, seed: u64) -> Vec<TokenUnit> {
    let num_sentences = sentence_offsets.len().saturating_sub(1);
    let mut order: Vec<usize> = (0..num_sentences).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut left = subsample;
    let mut units = Vec::new();
    for s in order {
        if left == 0 {
            break;
        }
        let start = sentence_offsets[s];
        let len = (sentence_offsets[s + 1] - start).min(left);
        units.push(TokenUnit {
            sentence: s,
            start,
            end: start + len,
        });
        left -= len;
    }
    units
}

struct LayerBlocks {
    /// `kb[i, u] = Σ_{j ∈ u} K_ij` over subsample rows `i`.
    kb: Array2<f64>,
    /// `ks[u, v] = Σ_{i ∈ u, j ∈ v} K_ij`.
    ks: Array2<f64>,
    /// `Σ_{i ∈ u, j ∈ v} K_ij²`.
    p_self: Array2<f64>,
}

/// Sentence-block aggregates of the token Gram matrices of every layer.
///
/// With unit weights `w_u`, the weighted HSIC between layers with Gram
/// matrices `K` and `L` is
/// `Σ_uv w_u w_v P_uv − (2/N) Σ_i w_i (KB w)_i (LB w)_i + (wᵀ KS w)(wᵀ LS w)/N²`,
/// which is exactly `‖Σ_i w_i (x_i − x̄_w)(y_i − ȳ_w)ᵀ‖²_F`.
pub struct GramCache {
    units: Vec<TokenUnit>,
    unit_sizes: Vec<f64>,
    row_unit: Vec<usize>,
    layers: Vec<LayerBlocks>,
    /// `Σ_{i ∈ u, j ∈ v} K_ij L_ij` for each adjacent pair.
    cross: Vec<Array2<f64>>,
}

impl GramCache {
    pub fn build(layers: &[LayerActivations], subsample: usize, seed: u64) -> Result<Self> {
        if layers.len() < 2 {
            return Err(SignalError::TooFewLayers(layers.len()));
        }
        let n0 = layers[0].total_tokens();
        if let Some(l) = layers.iter().find(|l| l.total_tokens() != n0) {
            return Err(SignalError::TokenCountMismatch(n0, l.total_tokens()));
        }
        let units = subsample_units(&layers[0].sentence_offsets, subsample.max(1), seed);
        let row_unit: Vec<usize> = units
            .iter()
            .enumerate()
            .flat_map(|(u, unit)| std::iter::repeat_n(u, unit.len()))
            .collect();
        let rows: Vec<usize> = units.iter().flat_map(|u| u.start..u.end).collect();
        let unit_sizes = units.iter().map(|u| u.len() as f64).collect();

        let centered: Vec<Array2<f64>> = layers
            .iter()
            .map(|l| {
                let sub = l.matrix.select(Axis(0), &rows);
                centered(sub.view())
            })
            .collect();
        for (l, c) in centered.iter().enumerate() {
            if c.iter().all(|v| v.abs() == 0.0) {
                return Err(SignalError::DegenerateLayer { layer: layers[l].layer_index });
            }
        }

        let mut cache = GramCache {
            units,
            unit_sizes,
            row_unit,
            layers: Vec::with_capacity(layers.len()),
            cross: Vec::with_capacity(layers.len() - 1),
        };
        let first = cache.accumulate(&centered[0], None);
        cache.layers.push(first.0);
        for g in 0..layers.len() - 1 {
            let (next, cross) = cache.accumulate(&centered[g + 1], Some(&centered[g]));
            cache.layers.push(next);
            cache.cross.push(cross.expect("cross requested"));
        }
        Ok(cache)
    }

    /// Block aggregates for layer `x`, plus the cross term against `prev` when given.
    fn accumulate(&self, x: &Array2<f64>, prev: Option<&Array2<f64>>) -> (LayerBlocks, Option<Array2<f64>>) {
        let n = x.nrows();
        let nu = self.units.len();
        let mut kb = Array2::<f64>::zeros((n, nu));
        let mut p_self = Array2::<f64>::zeros((nu, nu));
        let mut cross = prev.map(|_| Array2::<f64>::zeros((nu, nu)));
        let bounds: Vec<(usize, usize)> = {
            let mut acc = 0;
            self.units
                .iter()
                .map(|u| {
                    let b = (acc, acc + u.len());
                    acc += u.len();
                    b
                })
                .collect()
        };
        let mut r0 = 0;
        while r0 < n {
            let r1 = (r0 + GRAM_BLOCK_ROWS).min(n);
            let kblk = x.slice(s![r0..r1, ..]).dot(&x.t());
            let lblk = prev.map(|p| p.slice(s![r0..r1, ..]).dot(&p.t()));
            for bi in 0..(r1 - r0) {
                let i = r0 + bi;
                let ui = self.row_unit[i];
                let krow = kblk.row(bi);
                for (v, &(c0, c1)) in bounds.iter().enumerate() {
                    let mut sum = 0.0;
                    let mut sq = 0.0;
                    for j in c0..c1 {
                        let k = krow[j];
                        sum += k;
                        sq += k * k;
                    }
                    kb[[i, v]] = sum;
                    p_self[[ui, v]] += sq;
                    if let (Some(l), Some(c)) = (&lblk, cross.as_mut()) {
                        let lrow = l.row(bi);
                        let mut kl = 0.0;
                        for j in c0..c1 {
                            kl += krow[j] * lrow[j];
                        }
                        c[[ui, v]] += kl;
                    }
                }
            }
            r0 = r1;
        }
        let mut ks = Array2::<f64>::zeros((nu, nu));
        for (u, &(c0, c1)) in bounds.iter().enumerate() {
            let block_sum = kb.slice(s![c0..c1, ..]).sum_axis(Axis(0));
            ks.row_mut(u).assign(&block_sum);
        }
        (LayerBlocks { kb, ks, p_self }, cross)
    }

    pub fn units(&self) -> &[TokenUnit] {
        &self.units
    }

    pub fn num_gaps(&self) -> usize {
        self.cross.len()
    }

    /// CKA per gap with every unit weighted by its sentence's multiplicity.
    ///
    /// `sentence_weights` is indexed by original sentence id.
    pub fn cka_weighted(&self, sentence_weights: &[f64]) -> Result<Vec<f64>> {
        let w: Array1<f64> = self.units.iter().map(|u| sentence_weights[u.sentence]).collect();
        let total: f64 = w.iter().zip(&self.unit_sizes).map(|(a, b)| a * b).sum();
        if total <= 0.0 {
            return Err(SignalError::DegenerateLayer { layer: 0 });
        }
        let row_w: Array1<f64> = self.row_unit.iter().map(|&u| w[u]).collect();
        let per_layer: Vec<(Array1<f64>, f64, f64)> = self
            .layers
            .iter()
            .map(|lb| {
                let kw = lb.kb.dot(&w);
                let ksw = w.dot(&lb.ks.dot(&w));
                let t = w.dot(&lb.p_self.dot(&w));
                let mid: f64 = kw.iter().zip(&row_w).map(|(k, r)| r * k * k).sum();
                let hsic = t - 2.0 * mid / total + ksw * ksw / (total * total);
                (kw, ksw, hsic)
            })
            .collect();
        for (l, (_, _, h)) in per_layer.iter().enumerate() {
            if !(*h > 0.0) {
                return Err(SignalError::DegenerateLayer { layer: l });
            }
        }
        let mut out = Vec::with_capacity(self.cross.len());
        for (g, p) in self.cross.iter().enumerate() {
            let (ka, ksa, ha) = &per_layer[g];
            let (kb, ksb, hb) = &per_layer[g + 1];
            let t = w.dot(&p.dot(&w));
            let mid: f64 = ka.iter().zip(kb).zip(&row_w).map(|((a, b), r)| r * a * b).sum();
            let hsic = t - 2.0 * mid / total + ksa * ksb / (total * total);
            let cka = (hsic / (ha.sqrt() * hb.sqrt())).min(1.0);
            if !(cka > MIN_CKA) {
                return Err(SignalError::ZeroAlignment { gap: g });
            }
            out.push(cka);
        }
        Ok(out)
    }

    /// Representation-change signal `1/CKA` under the given sentence weights.
    pub fn signal_weighted(&self, sentence_weights: &[f64]) -> Result<SignalSeries> {
        let cka = self.cka_weighted(sentence_weights)?;
        Ok(SignalSeries::new(
            SignalKind::ReprChange,
            cka.into_iter().map(|c| 1.0 / c).collect(),
        ))
    }
}

/// `S1(ℓ) = 1 / CKA(H_ℓ, H_ℓ₊₁)` over a seeded token subsample.
pub fn repr_change_signal(layers: &[LayerActivations], subsample: usize, seed: u64) -> Result<SignalSeries> {
    let cache = GramCache::build(layers, subsample, seed)?;
    let num_sentences = layers[0].num_sentences();
    cache.signal_weighted(&vec![1.0; num_sentences])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::offsets_from_counts;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::StandardNormal;

    /// HSIC(A, B) ∝ tr(K H L H) with explicit Gram and centering matrices.
    fn hsic_gram_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let n = a.nrows();
        let k = a.dot(&a.t());
        let l = b.dot(&b.t());
        let h = Array2::from_shape_fn((n, n), |(i, j)| if i == j { 1.0 } else { 0.0 } - 1.0 / n as f64);
        let khlh = k.dot(&h).dot(&l).dot(&h);
        (0..n).map(|i| khlh[[i, i]]).sum()
    }

    fn random(n: usize, d: usize, seed: u64) -> Array2<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.sample::<f32, _>(StandardNormal))
    }

    #[test]
    fn cka_matches_gram_oracle_on_fixed_6x2() {
        let a: Array2<f64> = array![[1.0, 0.0], [0.0, 1.0], [2.0, 1.0], [-1.0, 3.0], [0.5, -2.0], [3.0, 0.5]];
        // Second coordinate decorrelated from the first representation.
        let b: Array2<f64> = array![[1.0, 2.0], [0.2, -1.0], [2.1, 0.0], [-0.8, 1.5], [0.4, 0.3], [2.9, -2.0]];
        let oracle = hsic_gram_oracle(&a, &b) / (hsic_gram_oracle(&a, &a) * hsic_gram_oracle(&b, &b)).sqrt();
        let got = linear_cka(a.mapv(|v| v as f32).view(), b.mapv(|v| v as f32).view()).unwrap();
        assert!((got - oracle).abs() < 1e-6, "{got} vs {oracle}");
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn identical_and_rotated_layers_give_unit_signal() {
        let x = random(40, 5, 1);
        let theta: f32 = 0.7;
        let mut rot = Array2::<f32>::eye(5);
        rot[[0, 0]] = theta.cos();
        rot[[0, 1]] = -theta.sin();
        rot[[1, 0]] = theta.sin();
        rot[[1, 1]] = theta.cos();
        let offs = offsets_from_counts(&[10, 10, 20]);
        let layers = vec![
            LayerActivations::new(0, x.clone(), offs.clone()).unwrap(),
            LayerActivations::new(1, x.clone(), offs.clone()).unwrap(),
            LayerActivations::new(2, x.dot(&rot), offs).unwrap(),
        ];
        let s1 = repr_change_signal(&layers, 8192, 3).unwrap();
        for v in s1.values {
            assert!((v - 1.0).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn gram_cache_matches_feature_route_and_weighting() {
        let counts = [7, 5, 9, 4];
        let offs = offsets_from_counts(&counts);
        let n: usize = counts.iter().sum();
        let x = random(n, 6, 10);
        let y = &x * 0.5 + &random(n, 6, 11);
        let layers = vec![
            LayerActivations::new(0, x.clone(), offs.clone()).unwrap(),
            LayerActivations::new(1, y.clone(), offs.clone()).unwrap(),
        ];
        let cache = GramCache::build(&layers, 10_000, 0).unwrap();
        let unit = cache.cka_weighted(&[1.0; 4]).unwrap()[0];
        let direct = linear_cka(x.view(), y.view()).unwrap();
        assert!((unit - direct).abs() < 1e-9);

        // Multiplicities (2, 0, 1, 3) equal CKA on physically repeated rows.
        let w = [2.0, 0.0, 1.0, 3.0];
        let weighted = cache.cka_weighted(&w).unwrap()[0];
        let mut rows = Vec::new();
        for (s, &m) in w.iter().enumerate() {
            for _ in 0..m as usize {
                rows.extend(offs[s]..offs[s + 1]);
            }
        }
        let xr = x.select(Axis(0), &rows);
        let yr = y.select(Axis(0), &rows);
        let expected = linear_cka(xr.view(), yr.view()).unwrap();
        assert!((weighted - expected).abs() < 1e-9, "{weighted} vs {expected}");
    }

    #[test]
    fn wide_matrices_use_gram_route() {
        let x = random(6, 20, 4);
        let y = random(6, 20, 5);
        let xf = x.mapv(|v| v as f64);
        let yf = y.mapv(|v| v as f64);
        let xc = &xf - &xf.mean_axis(Axis(0)).unwrap();
        let yc = &yf - &yf.mean_axis(Axis(0)).unwrap();
        let oracle = hsic_gram_oracle(&xc, &yc) / (hsic_gram_oracle(&xc, &xc) * hsic_gram_oracle(&yc, &yc)).sqrt();
        assert!((linear_cka(x.view(), y.view()).unwrap() - oracle).abs() < 1e-9);
    }

    #[test]
    fn zero_variance_layer_is_degenerate() {
        let offs = offsets_from_counts(&[3, 3]);
        let layers = vec![
            LayerActivations::new(0, random(6, 3, 1), offs.clone()).unwrap(),
            LayerActivations::new(1, Array2::from_elem((6, 3), 2.5), offs).unwrap(),
        ];
        assert!(matches!(
            repr_change_signal(&layers, 100, 0),
            Err(SignalError::DegenerateLayer { layer: 1 })
        ));
        assert!(matches!(
            repr_change_signal(&layers[..1], 100, 0),
            Err(SignalError::TooFewLayers(1))
        ));
    }

    #[test]
    fn subsample_is_seeded_and_truncates() {
        let offs = offsets_from_counts(&[4, 4, 4, 4]);
        let a = subsample_units(&offs, 10, 7);
        assert_eq!(a, subsample_units(&offs, 10, 7));
        assert_eq!(a.iter().map(TokenUnit::len).sum::<usize>(), 10);
        assert_eq!(a.len(), 3);
        assert_eq!(a[2].len(), 2);
    }

    #[test]
    fn sentence_order_does_not_change_full_sample_signal() {
        let counts = [5, 3, 6, 4, 2];
        let offs = offsets_from_counts(&counts);
        let n: usize = counts.iter().sum();
        let x = random(n, 4, 21);
        let y = &x + &(random(n, 4, 22) * 0.3);
        let perm = [3, 0, 4, 1, 2];
        let mut rows = Vec::new();
        for &s in &perm {
            rows.extend(offs[s]..offs[s + 1]);
        }
        let pcounts: Vec<usize> = perm.iter().map(|&s| counts[s]).collect();
        let poffs = offsets_from_counts(&pcounts);
        let a = repr_change_signal(
            &[
                LayerActivations::new(0, x.clone(), offs.clone()).unwrap(),
                LayerActivations::new(1, y.clone(), offs.clone()).unwrap(),
            ],
            1000,
            1,
        )
        .unwrap();
        let b = repr_change_signal(
            &[
                LayerActivations::new(0, x.select(Axis(0), &rows), poffs.clone()).unwrap(),
                LayerActivations::new(1, y.select(Axis(0), &rows), poffs).unwrap(),
            ],
            1000,
            1,
        )
        .unwrap();
        assert!((a.values[0] - b.values[0]).abs() < 1e-9);
    }
}
