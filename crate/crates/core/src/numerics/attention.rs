use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{gelu, gelu_backward, gemm, Grads, LayerNorm, Linear, LinearInit, LnCache, ParameterStore};
use crate::math::{exp, sqrt};
use crate::rng::StreamRng;
use crate::{Error, Result};

/// Pre-norm Transformer block: multi-head self-attention then a GELU MLP
/// with ×4 expansion, each wrapped in a residual connection.
///
/// No positional information is injected here, so the block is equivariant
/// under token permutations.
#[derive(Debug, Clone)]
pub struct TransformerBlock {
    pub dim: usize,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

/// Activations kept from the forward pass.
#[derive(Debug, Clone)]
pub struct BlockCache {
    n: usize,
    ln1: LnCache,
    h1: Vec<f64>,
    qkv: Vec<f64>,
    probs: Vec<f64>,
    attn: Vec<f64>,
    ln2: LnCache,
    h2: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl TransformerBlock {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{name}: width {dim} not divisible by {heads} heads"
            )));
        }
        let std = 0.02;
        Ok(TransformerBlock {
            dim,
            heads,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true, LinearInit::FanIn, rng)?,
            out: Linear::new(store, &format!("{name}.attn_out"), dim, dim, true, LinearInit::Normal(std), rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim)?,
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, 4 * dim, true, LinearInit::FanIn, rng)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), 4 * dim, dim, true, LinearInit::Normal(std), rng)?,
        })
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Copies head `h` of section `sec` (0=Q, 1=K, 2=V) out of the packed
    /// `n×3d` projection.
    fn gather(&self, qkv: &[f64], n: usize, sec: usize, h: usize) -> Vec<f64> {
        let dh = self.head_dim();
        let off = sec * self.dim + h * dh;
        let mut out = Vec::with_capacity(n * dh);
        for t in 0..n {
            let row = &qkv[t * 3 * self.dim..];
            out.extend_from_slice(&row[off..off + dh]);
        }
        out
    }

    fn scatter_add(&self, dst: &mut [f64], width: usize, off: usize, src: &[f64], n: usize) {
        let dh = self.head_dim();
        for t in 0..n {
            for (d, s) in dst[t * width + off..t * width + off + dh]
                .iter_mut()
                .zip(&src[t * dh..(t + 1) * dh])
            {
                *d += s;
            }
        }
    }

    pub fn forward(&self, store: &ParameterStore, x: &[f64], n: usize) -> (Vec<f64>, BlockCache) {
        let d = self.dim;
        let dh = self.head_dim();
        let scale = 1.0 / sqrt(dh as f64);
        let (h1, ln1) = self.ln1.forward(store, x);
        let qkv = self.qkv.forward(store, &h1, n);
        let mut probs = vec![0.0; self.heads * n * n];
        let mut attn = vec![0.0; n * d];
        for h in 0..self.heads {
            let q = self.gather(&qkv, n, 0, h);
            let k = self.gather(&qkv, n, 1, h);
            let v = self.gather(&qkv, n, 2, h);
            let p = &mut probs[h * n * n..(h + 1) * n * n];
            gemm(n, dh, n, &q, false, &k, true, p, false);
            for row in p.chunks_mut(n) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * scale));
                let mut sum = 0.0;
                for s in row.iter_mut() {
                    *s = exp(*s * scale - mx);
                    sum += *s;
                }
                for s in row.iter_mut() {
                    *s /= sum;
                }
            }
            let mut o = vec![0.0; n * dh];
            gemm(n, n, dh, p, false, &v, false, &mut o, false);
            self.scatter_add(&mut attn, d, h * dh, &o, n);
        }
        let a = self.out.forward(store, &attn, n);
        let x1: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let (h2, ln2) = self.ln2.forward(store, &x1);
        let pre = self.fc1.forward(store, &h2, n);
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let m = self.fc2.forward(store, &act, n);
        let y: Vec<f64> = x1.iter().zip(&m).map(|(u, v)| u + v).collect();
        (
            y,
            BlockCache {
                n,
                ln1,
                h1,
                qkv,
                probs,
                attn,
                ln2,
                h2,
                pre,
                act,
            },
        )
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        grads: &mut Grads,
        cache: &BlockCache,
        dy: &[f64],
    ) -> Vec<f64> {
        let n = cache.n;
        let d = self.dim;
        let dh = self.head_dim();
        let scale = 1.0 / sqrt(dh as f64);

        let dact = self.fc2.backward(store, grads, &cache.act, n, dy);
        let dpre = gelu_backward(&cache.pre, &dact);
        let dh2 = self.fc1.backward(store, grads, &cache.h2, n, &dpre);
        let dx1_ln = self.ln2.backward(store, grads, &cache.ln2, &dh2);
        let dx1: Vec<f64> = dy.iter().zip(&dx1_ln).map(|(a, b)| a + b).collect();

        let dattn = self.out.backward(store, grads, &cache.attn, n, &dx1);
        let mut dqkv = vec![0.0; n * 3 * d];
        for h in 0..self.heads {
            let q = self.gather(&cache.qkv, n, 0, h);
            let k = self.gather(&cache.qkv, n, 1, h);
            let v = self.gather(&cache.qkv, n, 2, h);
            let p = &cache.probs[h * n * n..(h + 1) * n * n];
            let mut d_o = Vec::with_capacity(n * dh);
            for t in 0..n {
                d_o.extend_from_slice(&dattn[t * d + h * dh..t * d + (h + 1) * dh]);
            }
            let mut dp = vec![0.0; n * n];
            gemm(n, dh, n, &d_o, false, &v, true, &mut dp, false);
            let mut dv = vec![0.0; n * dh];
            gemm(n, n, dh, p, true, &d_o, false, &mut dv, false);
            // softmax backward, folded with the 1/sqrt(dh) logit scale
            for (dp_row, p_row) in dp.chunks_mut(n).zip(p.chunks(n)) {
                let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                for (g, pv) in dp_row.iter_mut().zip(p_row) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            let mut dq = vec![0.0; n * dh];
            gemm(n, n, dh, &dp, false, &k, false, &mut dq, false);
            let mut dk = vec![0.0; n * dh];
            gemm(n, n, dh, &dp, true, &q, false, &mut dk, false);
            self.scatter_add(&mut dqkv, 3 * d, h * dh, &dq, n);
            self.scatter_add(&mut dqkv, 3 * d, d + h * dh, &dk, n);
            self.scatter_add(&mut dqkv, 3 * d, 2 * d + h * dh, &dv, n);
        }
        let dh1 = self.qkv.backward(store, grads, &cache.h1, n, &dqkv);
        let dx_ln = self.ln1.backward(store, grads, &cache.ln1, &dh1);
        dx1.iter().zip(&dx_ln).map(|(a, b)| a + b).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference_gradient, FdOptions};
    use crate::rng::{normal, stream};

    fn block(dim: usize, heads: usize) -> (TransformerBlock, ParameterStore) {
        let mut store = ParameterStore::new();
        let mut rng = stream(3, "test/block");
        let b = TransformerBlock::new(&mut store, "blk", dim, heads, &mut rng).unwrap();
        // make the residual branches non-trivial
        for id in [b.out.weight, b.fc2.weight] {
            for v in store.data_mut(id) {
                *v = 0.2 * normal(&mut rng);
            }
        }
        (b, store)
    }

    fn tokens(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = stream(seed, "test/tokens");
        (0..n * d).map(|_| normal(&mut rng)).collect()
    }

    #[test]
    fn indivisible_heads_is_a_config_error() {
        let mut store = ParameterStore::new();
        let mut rng = stream(0, "x");
        assert!(matches!(
            TransformerBlock::new(&mut store, "b", 10, 4, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn zero_output_projections_give_identity() {
        let (b, mut store) = block(8, 2);
        for id in [b.out.weight, b.out.bias.unwrap(), b.fc2.weight, b.fc2.bias.unwrap()] {
            store.data_mut(id).fill(0.0);
        }
        let x = tokens(5, 8, 1);
        let (y, _) = b.forward(&store, &x, 5);
        assert_eq!(x, y);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (b, store) = block(8, 2);
        let x = tokens(1, 8, 2);
        let (y, _) = b.forward(&store, &x, 1);
        // with one key the softmax is exactly 1, so attention output is V
        let (h1, _) = b.ln1.forward(&store, &x);
        let qkv = b.qkv.forward(&store, &h1, 1);
        let v = &qkv[16..24];
        let a = b.out.forward(&store, v, 1);
        let x1: Vec<f64> = x.iter().zip(&a).map(|(p, q)| p + q).collect();
        let (h2, _) = b.ln2.forward(&store, &x1);
        let pre = b.fc1.forward(&store, &h2, 1);
        let act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
        let m = b.fc2.forward(&store, &act, 1);
        for i in 0..8 {
            assert!((y[i] - (x1[i] + m[i])).abs() < 1e-12);
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (b, store) = block(8, 2);
        let n = 6;
        let x = tokens(n, 8, 4);
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut xp = vec![0.0; n * 8];
        for (i, &p) in perm.iter().enumerate() {
            xp[i * 8..(i + 1) * 8].copy_from_slice(&x[p * 8..(p + 1) * 8]);
        }
        let (y, _) = b.forward(&store, &x, n);
        let (yp, _) = b.forward(&store, &xp, n);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((yp[i * 8 + c] - y[p * 8 + c]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (b, store) = block(8, 2);
        let n = 4;
        let x = tokens(n, 8, 5);
        let w = tokens(n, 8, 6);
        let loss = |s: &ParameterStore| -> Result<f64> {
            let (y, _) = b.forward(s, &x, n);
            Ok(y.iter().zip(&w).map(|(a, b)| a * b).sum())
        };
        let (_, cache) = b.forward(&store, &x, n);
        let mut grads = Grads::zeros_like(&store);
        let dx = b.backward(&store, &mut grads, &cache, &w);
        let report = finite_difference_gradient(
            loss,
            &store,
            &grads,
            &FdOptions {
                step: 1e-5,
                ..FdOptions::default()
            },
        )
        .unwrap();
        assert!(report.max_rel_err() < 1e-6, "{report:?}");

        // input gradient
        let h = 1e-5;
        for i in [0usize, 7, 13, 31] {
            let mut xp = x.clone();
            xp[i] += h;
            let mut xm = x.clone();
            xm[i] -= h;
            let lp: f64 = b.forward(&store, &xp, n).0.iter().zip(&w).map(|(a, c)| a * c).sum();
            let lm: f64 = b.forward(&store, &xm, n).0.iter().zip(&w).map(|(a, c)| a * c).sum();
            let fd = (lp - lm) / (2.0 * h);
            assert!((fd - dx[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
