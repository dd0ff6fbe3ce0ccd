//! Pairwise sigmoid contrastive loss, dense feature matching, and their
//! weighted combination.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::math::{exp, log, log_sigmoid, sigmoid, sqrt};
use crate::numerics::{gemm, Tensor};
use crate::teachers::TeacherKind;
use crate::towers::{EmbeddingBatch, FeatureMap};
use crate::{Error, Result};

/// Learned temperature (as `t = exp(t')`) and bias of the sigmoid loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveParams {
    pub log_temperature: f64,
    pub bias: f64,
}

impl Default for ContrastiveParams {
    fn default() -> Self {
        ContrastiveParams {
            log_temperature: log(10.0),
            bias: -10.0,
        }
    }
}

impl ContrastiveParams {
    pub fn temperature(&self) -> f64 {
        exp(self.log_temperature)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub d_image: Vec<f64>,
    pub d_text: Vec<f64>,
    pub d_log_temperature: f64,
    pub d_bias: f64,
}

fn similarities(batch: &EmbeddingBatch) -> Result<Vec<f64>> {
    let n = batch.n;
    if n < 2 {
        return Err(Error::Empty(format!(
            "sigmoid contrastive loss needs at least 2 pairs, got {n}"
        )));
    }
    let mut s = vec![0.0; n * n];
    gemm(n, batch.dim, n, &batch.image, false, &batch.text, true, &mut s, false);
    Ok(s)
}

/// `−(1/N) Σ_ij log σ(z_ij (t⟨x_i, y_j⟩ + b))` with `z_ii = 1`, `z_ij = −1`.
pub fn sigmoid_contrastive(batch: &EmbeddingBatch, cp: ContrastiveParams) -> Result<f64> {
    let s = similarities(batch)?;
    let n = batch.n;
    let t = cp.temperature();
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            total -= log_sigmoid(z * (t * s[i * n + j] + cp.bias));
        }
    }
    Ok(total / n as f64)
}

pub fn sigmoid_contrastive_grad(
    batch: &EmbeddingBatch,
    cp: ContrastiveParams,
) -> Result<(f64, ContrastiveGrad)> {
    let s = similarities(batch)?;
    let n = batch.n;
    let d = batch.dim;
    let t = cp.temperature();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut g = vec![0.0; n * n];
    let (mut dt, mut db) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let z = if i == j { 1.0 } else { -1.0 };
            let m = z * (t * s[i * n + j] + cp.bias);
            total -= log_sigmoid(m);
            let gl = -z * sigmoid(-m) * inv_n;
            g[i * n + j] = gl * t;
            dt += gl * s[i * n + j] * t;
            db += gl;
        }
    }
    let mut d_image = vec![0.0; n * d];
    let mut d_text = vec![0.0; n * d];
    gemm(n, n, d, &g, false, &batch.text, false, &mut d_image, false);
    gemm(n, n, d, &g, true, &batch.image, false, &mut d_text, false);
    Ok((
        total * inv_n,
        ContrastiveGrad {
            d_image,
            d_text,
            d_log_temperature: dt,
            d_bias: db,
        },
    ))
}

/// Denominator floor of the cosine term, as `max(|a|·|b|, ε)`.
pub const COS_EPS: f64 = 1e-8;

/// The three sub-terms of one feature-matching loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MatchTerms {
    pub l1: f64,
    pub mse: f64,
    pub cos: f64,
}

impl MatchTerms {
    pub fn total(&self) -> f64 {
        self.l1 + self.mse + self.cos
    }

    pub fn mean(items: &[MatchTerms]) -> MatchTerms {
        let n = items.len().max(1) as f64;
        let mut m = MatchTerms::default();
        for t in items {
            m.l1 += t.l1 / n;
            m.mse += t.mse / n;
            m.cos += t.cos / n;
        }
        m
    }
}

fn check_same(fs: &FeatureMap, ft: &FeatureMap) -> Result<()> {
    if fs.dims() != ft.dims() {
        return Err(Error::shape(format!(
            "feature match between {:?} and {:?}",
            fs.dims(),
            ft.dims()
        )));
    }
    Ok(())
}

/// `mean|F_s − F_t| + mean (F_s − F_t)² + mean_positions (1 − cos)`, with
/// cosine taken along channels at each spatial position.
pub fn feature_match(fs: &FeatureMap, ft: &FeatureMap) -> Result<MatchTerms> {
    Ok(feature_match_grad(fs, ft)?.0)
}

/// Loss terms and `∂L_match/∂F_s`.
pub fn feature_match_grad(fs: &FeatureMap, ft: &FeatureMap) -> Result<(MatchTerms, FeatureMap)> {
    check_same(fs, ft)?;
    let (d, h, w) = fs.dims();
    let a = fs.values().data();
    let b = ft.values().data();
    let count = a.len() as f64;
    let positions = h * w;
    let mut terms = MatchTerms::default();
    let mut grad = vec![0.0; a.len()];
    for ((g, x), y) in grad.iter_mut().zip(a).zip(b) {
        let diff = x - y;
        terms.l1 += diff.abs();
        terms.mse += diff * diff;
        let sign = if diff > 0.0 {
            1.0
        } else if diff < 0.0 {
            -1.0
        } else {
            0.0
        };
        *g = sign / count + 2.0 * diff / count;
    }
    terms.l1 /= count;
    terms.mse /= count;
    let inv_p = 1.0 / positions as f64;
    for p in 0..positions {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for c in 0..d {
            let (x, y) = (a[c * positions + p], b[c * positions + p]);
            ab += x * y;
            aa += x * x;
            bb += y * y;
        }
        let prod = sqrt(aa * bb);
        let clamped = prod <= COS_EPS;
        let denom = if clamped { COS_EPS } else { prod };
        let cos = ab / denom;
        terms.cos += (1.0 - cos) * inv_p;
        for c in 0..d {
            let (x, y) = (a[c * positions + p], b[c * positions + p]);
            let dcos = if clamped { y / denom } else { y / denom - cos * x / aa };
            grad[c * positions + p] -= dcos * inv_p;
        }
    }
    let g = FeatureMap::new(Tensor::new(vec![d, h, w], grad)?)?;
    Ok((terms, g))
}

/// Feature-matching weights `(α_s, α_d, α_v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha_s: f64,
    pub alpha_d: f64,
    pub alpha_v: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha_s: 2.0,
            alpha_d: 1.0,
            alpha_v: 1.0,
        }
    }
}

impl LossWeights {
    pub const CONTRASTIVE_ONLY: LossWeights = LossWeights {
        alpha_s: 0.0,
        alpha_d: 0.0,
        alpha_v: 0.0,
    };

    pub fn new(alpha_s: f64, alpha_d: f64, alpha_v: f64) -> Result<Self> {
        let w = LossWeights { alpha_s, alpha_d, alpha_v };
        if w.as_array().iter().any(|a| *a < 0.0 || !a.is_finite()) {
            return Err(Error::config(format!("loss weights must be finite and ≥ 0, got {w:?}")));
        }
        Ok(w)
    }

    pub fn alpha(&self, k: TeacherKind) -> f64 {
        match k {
            TeacherKind::Siglip => self.alpha_s,
            TeacherKind::Dinov2 => self.alpha_d,
            TeacherKind::Vit => self.alpha_v,
        }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.alpha_s, self.alpha_d, self.alpha_v]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_siglip: f64,
    /// Per teacher in `TeacherKind::ALL` order; `None` when not evaluated.
    pub matches: [Option<MatchTerms>; 3],
    pub total: f64,
}

impl LossReport {
    pub fn match_total(&self, k: TeacherKind) -> f64 {
        let i = TeacherKind::ALL.iter().position(|t| *t == k).unwrap_or(0);
        self.matches[i].map_or(0.0, |m| m.total())
    }
}

/// `L = L_siglip + Σ_k α_k L_match^k`, in fixed teacher order.
pub fn combine(l_siglip: f64, matches: [Option<MatchTerms>; 3], w: LossWeights) -> Result<LossReport> {
    let mut total = l_siglip;
    for (k, m) in TeacherKind::ALL.iter().zip(&matches) {
        let a = w.alpha(*k);
        match m {
            Some(m) => total += a * m.total(),
            None if a > 0.0 => {
                return Err(Error::config(format!(
                    "teacher {} has weight {a} but no features",
                    k.name()
                )))
            }
            None => {}
        }
    }
    Ok(LossReport {
        l_siglip,
        matches,
        total,
    })
}

/// Student/teacher feature pairs for every sample of a batch.
pub type FeaturePairs<'a> = &'a [(FeatureMap, FeatureMap)];

/// Full objective for a batch: contrastive loss plus the batch-mean match
/// loss of each teacher that has features.
pub fn vect_total(
    batch: &EmbeddingBatch,
    features: [Option<FeaturePairs<'_>>; 3],
    cp: ContrastiveParams,
    w: LossWeights,
) -> Result<LossReport> {
    let l = sigmoid_contrastive(batch, cp)?;
    let mut matches = [None; 3];
    for (m, f) in matches.iter_mut().zip(features) {
        if let Some(pairs) = f {
            let terms = pairs
                .iter()
                .map(|(s, t)| feature_match(s, t))
                .collect::<Result<Vec<_>>>()?;
            *m = Some(MatchTerms::mean(&terms));
        }
    }
    combine(l, matches, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::l2_normalize;
    use crate::rng::{normal, stream};

    fn batch(n: usize, d: usize, seed: u64) -> EmbeddingBatch {
        let mut rng = stream(seed, "b");
        let mut row = || l2_normalize(&(0..d).map(|_| normal(&mut rng)).collect::<Vec<_>>()).0;
        let image: Vec<Vec<f64>> = (0..n).map(|_| row()).collect();
        let text: Vec<Vec<f64>> = (0..n).map(|_| row()).collect();
        EmbeddingBatch::from_rows(&image, &text).unwrap()
    }

    fn fmap(d: usize, h: usize, w: usize, seed: u64) -> FeatureMap {
        let mut rng = stream(seed, "f");
        FeatureMap::new(Tensor::from_fn(vec![d, h, w], |_| normal(&mut rng))).unwrap()
    }

    #[test]
    fn zero_logits_give_n_ln2() {
        for n in [2usize, 5] {
            let cp = ContrastiveParams { log_temperature: -60.0, bias: 0.0 };
            let l = sigmoid_contrastive(&batch(n, 4, 1), cp).unwrap();
            assert!((l - n as f64 * core::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_two_pair_loss() {
        let s = 0.5f64.sqrt();
        let b = EmbeddingBatch::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]], &[vec![s, s], vec![0.0, 1.0]]).unwrap();
        let cp = ContrastiveParams { log_temperature: log(2.0), bias: -1.0 };
        // logits: [2s-1, -1; 2s-1, 1]
        let ls = |x: f64| -(1.0 + (-x).exp()).ln();
        let want = -(ls(2.0 * s - 1.0) + ls(-(-1.0)) + ls(-(2.0 * s - 1.0)) + ls(1.0)) / 2.0;
        assert!((sigmoid_contrastive(&b, cp).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn contrastive_needs_two_pairs() {
        let b = EmbeddingBatch::from_rows(&[vec![1.0]], &[vec![1.0]]).unwrap();
        assert!(matches!(sigmoid_contrastive(&b, ContrastiveParams::default()), Err(Error::Empty(_))));
    }

    #[test]
    fn joint_permutation_invariance() {
        let b = batch(6, 5, 2);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut img = Vec::new();
        let mut txt = Vec::new();
        for &p in &perm {
            img.push(b.image[p * 5..(p + 1) * 5].to_vec());
            txt.push(b.text[p * 5..(p + 1) * 5].to_vec());
        }
        let pb = EmbeddingBatch::from_rows(&img, &txt).unwrap();
        let cp = ContrastiveParams::default();
        let d = sigmoid_contrastive(&b, cp).unwrap() - sigmoid_contrastive(&pb, cp).unwrap();
        assert!(d.abs() < 1e-10);
    }

    #[test]
    fn contrastive_gradients_match_finite_differences() {
        let b = batch(4, 3, 3);
        let cp = ContrastiveParams { log_temperature: 0.7, bias: -1.3 };
        let (l, g) = sigmoid_contrastive_grad(&b, cp).unwrap();
        assert!((l - sigmoid_contrastive(&b, cp).unwrap()).abs() < 1e-14);
        let h = 1e-6;
        let f = |cp: ContrastiveParams| sigmoid_contrastive(&b, cp).unwrap();
        let dt = (f(ContrastiveParams { log_temperature: cp.log_temperature + h, ..cp })
            - f(ContrastiveParams { log_temperature: cp.log_temperature - h, ..cp }))
            / (2.0 * h);
        let db = (f(ContrastiveParams { bias: cp.bias + h, ..cp }) - f(ContrastiveParams { bias: cp.bias - h, ..cp })) / (2.0 * h);
        assert!((dt - g.d_log_temperature).abs() < 1e-7);
        assert!((db - g.d_bias).abs() < 1e-7);
        // embedding gradients, treating rows as free (no renormalization)
        let raw = |img: &[f64], txt: &[f64]| {
            let n = 4;
            let t = cp.temperature();
            let mut tot = 0.0;
            for i in 0..n {
                for j in 0..n {
                    let s: f64 = (0..3).map(|k| img[i * 3 + k] * txt[j * 3 + k]).sum();
                    let z = if i == j { 1.0 } else { -1.0 };
                    tot -= log_sigmoid(z * (t * s + cp.bias));
                }
            }
            tot / n as f64
        };
        for i in 0..12 {
            let mut p = b.image.clone();
            p[i] += h;
            let mut m = b.image.clone();
            m[i] -= h;
            let fd = (raw(&p, &b.text) - raw(&m, &b.text)) / (2.0 * h);
            assert!((fd - g.d_image[i]).abs() < 1e-7);
            let mut p = b.text.clone();
            p[i] += h;
            let mut m = b.text.clone();
            m[i] -= h;
            let fd = (raw(&b.image, &p) - raw(&b.image, &m)) / (2.0 * h);
            assert!((fd - g.d_text[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn feature_match_cases() {
        let f = fmap(5, 3, 4, 1);
        let t = feature_match(&f, &f).unwrap();
        assert_eq!(t.total(), 0.0);

        // unit columns, anti-parallel
        let mut u = f.values().clone();
        for p in 0..12 {
            let n: f64 = (0..5).map(|c| u.data()[c * 12 + p].powi(2)).sum::<f64>().sqrt();
            for c in 0..5 {
                u.data_mut()[c * 12 + p] /= n;
            }
        }
        let neg = Tensor::from_fn(vec![5, 3, 4], |i| -u.data()[i]);
        let a = FeatureMap::new(u.clone()).unwrap();
        let b = FeatureMap::new(neg).unwrap();
        let t = feature_match(&a, &b).unwrap();
        assert!((t.cos - 2.0).abs() < 1e-12);
        let l1: f64 = u.data().iter().map(|v| 2.0 * v.abs()).sum::<f64>() / 60.0;
        assert!((t.l1 - l1).abs() < 1e-12);
        assert!((t.mse - 4.0 * 12.0 / 60.0).abs() < 1e-12);

        assert!(matches!(feature_match(&f, &fmap(5, 4, 3, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn feature_match_against_direct_sums() {
        let a = fmap(3, 2, 5, 3);
        let b = fmap(3, 2, 5, 4);
        let t = feature_match(&a, &b).unwrap();
        let (x, y) = (a.values().data(), b.values().data());
        let mut l1 = 0.0;
        let mut mse = 0.0;
        for i in 0..30 {
            l1 += (x[i] - y[i]).abs();
            mse += (x[i] - y[i]) * (x[i] - y[i]);
        }
        let mut cos = 0.0;
        for p in 0..10 {
            let col = |v: &[f64]| [v[p], v[10 + p], v[20 + p]];
            let (u, v) = (col(x), col(y));
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            cos += 1.0 - dot / (nu * nv);
        }
        assert!((t.l1 - l1 / 30.0).abs() < 1e-12);
        assert!((t.mse - mse / 30.0).abs() < 1e-12);
        assert!((t.cos - cos / 10.0).abs() < 1e-12);
        assert!(t.total() > 0.0);
    }

    #[test]
    fn feature_match_gradient() {
        let a = fmap(4, 2, 3, 5);
        let b = fmap(4, 2, 3, 6);
        let (_, g) = feature_match_grad(&a, &b).unwrap();
        let h = 1e-6;
        for i in 0..24 {
            let eval = |delta: f64| {
                let mut v = a.values().clone();
                v.data_mut()[i] += delta;
                feature_match(&FeatureMap::new(v).unwrap(), &b).unwrap().total()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!((fd - g.values().data()[i]).abs() < 1e-7, "{i}");
        }
    }

    #[test]
    fn total_combination() {
        let half = MatchTerms { l1: 0.2, mse: 0.1, cos: 0.2 };
        let all = [Some(half); 3];
        let r = combine(1.25, all, LossWeights::new(1.0, 1.0, 1.0).unwrap()).unwrap();
        assert!((r.total - 2.75).abs() < 1e-12);
        let r = combine(1.25, [None; 3], LossWeights::CONTRASTIVE_ONLY).unwrap();
        assert_eq!(r.total, 1.25);
        assert!(combine(1.0, [Some(half), None, Some(half)], LossWeights::default()).is_err());
        assert_eq!(LossWeights::default().as_array(), [2.0, 1.0, 1.0]);
        assert!(LossWeights::new(-1.0, 0.0, 0.0).is_err());
        // affine in each α with slope equal to that teacher's match term
        let terms = [
            Some(MatchTerms { l1: 0.3, mse: 0.05, cos: 0.4 }),
            Some(MatchTerms { l1: 0.1, mse: 0.01, cos: 0.2 }),
            Some(MatchTerms { l1: 0.7, mse: 0.5, cos: 0.9 }),
        ];
        for k in 0..3 {
            let mut w1 = [1.0, 1.0, 1.0];
            let mut w2 = w1;
            w1[k] = 0.5;
            w2[k] = 3.0;
            let r1 = combine(0.9, terms, LossWeights::new(w1[0], w1[1], w1[2]).unwrap()).unwrap();
            let r2 = combine(0.9, terms, LossWeights::new(w2[0], w2[1], w2[2]).unwrap()).unwrap();
            let slope = (r2.total - r1.total) / 2.5;
            assert!((slope - terms[k].unwrap().total()).abs() < 1e-12);
        }
    }

    #[test]
    fn vect_total_uses_batch_means() {
        let b = batch(3, 4, 7);
        let pairs: Vec<(FeatureMap, FeatureMap)> =
            (0..3).map(|i| (fmap(2, 2, 2, 10 + i), fmap(2, 2, 2, 20 + i))).collect();
        let cp = ContrastiveParams::default();
        let r = vect_total(&b, [Some(&pairs), None, None], cp, LossWeights::new(2.0, 0.0, 0.0).unwrap()).unwrap();
        let mean: f64 = pairs.iter().map(|(s, t)| feature_match(s, t).unwrap().total()).sum::<f64>() / 3.0;
        let ls = sigmoid_contrastive(&b, cp).unwrap();
        assert!((r.total - (ls + 2.0 * mean)).abs() < 1e-12);
    }
}
