use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{Grads, ParamId, ParameterStore, Tensor};
use crate::math::sqrt;
use crate::{Error, Result};

/// Epsilon shared by every normalization in the crate.
pub const LN_EPS: f64 = 1e-6;

/// Per-row statistics retained for the backward pass.
#[derive(Debug, Clone)]
pub struct LnCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
    pub dim: usize,
}

/// Normalizes each length-`dim` row of `x` to zero mean, unit variance.
pub fn layer_norm_rows(x: &[f64], dim: usize, eps: f64) -> LnCache {
    let rows = x.len() / dim;
    let mut xhat = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * dim..(r + 1) * dim];
        let mean = row.iter().sum::<f64>() / dim as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / dim as f64;
        let rs = 1.0 / sqrt(var + eps);
        rstd[r] = rs;
        for (o, v) in xhat[r * dim..(r + 1) * dim].iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
    LnCache { xhat, rstd, dim }
}

/// Gradient through [`layer_norm_rows`] given `dL/dxhat`.
pub fn layer_norm_rows_backward(cache: &LnCache, dxhat: &[f64]) -> Vec<f64> {
    let dim = cache.dim;
    let mut dx = vec![0.0; dxhat.len()];
    for (r, rs) in cache.rstd.iter().enumerate() {
        let xh = &cache.xhat[r * dim..(r + 1) * dim];
        let dh = &dxhat[r * dim..(r + 1) * dim];
        let mean_dh = dh.iter().sum::<f64>() / dim as f64;
        let mean_dh_xh = dh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / dim as f64;
        for ((o, d), x) in dx[r * dim..(r + 1) * dim].iter_mut().zip(dh).zip(xh) {
            *o = rs * (d - mean_dh - x * mean_dh_xh);
        }
    }
    dx
}

/// Channel-wise layer normalization of a channels-first tensor.
///
/// `x` has shape `[C, ...]`; every position across the trailing axes is
/// normalized along `C`.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    if x.is_empty() || x.shape().is_empty() {
        return Err(Error::Empty("layer_norm input".into()));
    }
    if eps <= 0.0 {
        return Err(Error::config(format!("layer_norm eps must be > 0, got {eps}")));
    }
    let c = x.shape()[0];
    let pos = x.numel() / c;
    let rows = super::transpose(x.data(), c, pos);
    let cache = layer_norm_rows(&rows, c, eps);
    Tensor::new(x.shape().to_vec(), super::transpose(&cache.xhat, pos, c))
}

/// Layer norm with learned gain and bias, applied row-wise.
#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        let gain = store.add(&format!("{name}.gain"), Tensor::filled(vec![dim], 1.0), true)?;
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(vec![dim]), true)?;
        Ok(LayerNorm { gain, bias, dim })
    }

    pub fn forward(&self, store: &ParameterStore, x: &[f64]) -> (Vec<f64>, LnCache) {
        let cache = layer_norm_rows(x, self.dim, LN_EPS);
        let g = store.data(self.gain);
        let b = store.data(self.bias);
        let mut y = cache.xhat.clone();
        for row in y.chunks_mut(self.dim) {
            for ((v, gg), bb) in row.iter_mut().zip(g).zip(b) {
                *v = *v * gg + bb;
            }
        }
        (y, cache)
    }

    pub fn backward(
        &self,
        store: &ParameterStore,
        grads: &mut Grads,
        cache: &LnCache,
        dy: &[f64],
    ) -> Vec<f64> {
        let g = store.data(self.gain);
        let mut dxhat = vec![0.0; dy.len()];
        {
            let gg = grads.get_mut(self.gain);
            for (row_dy, row_xh) in dy.chunks(self.dim).zip(cache.xhat.chunks(self.dim)) {
                for ((acc, d), xh) in gg.iter_mut().zip(row_dy).zip(row_xh) {
                    *acc += d * xh;
                }
            }
        }
        {
            let gb = grads.get_mut(self.bias);
            for row_dy in dy.chunks(self.dim) {
                for (acc, d) in gb.iter_mut().zip(row_dy) {
                    *acc += d;
                }
            }
        }
        for (o_row, d_row) in dxhat.chunks_mut(self.dim).zip(dy.chunks(self.dim)) {
            for ((o, d), gg) in o_row.iter_mut().zip(d_row).zip(g) {
                *o = d * gg;
            }
        }
        layer_norm_rows_backward(cache, &dxhat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_channels_map_to_zero() {
        let x = Tensor::new(vec![3, 1], vec![5.0, 5.0, 5.0]).unwrap();
        let y = layer_norm(&x, LN_EPS).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn one_two_three() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = layer_norm(&x, 1e-6).unwrap();
        // (x - 2) / sqrt(2/3 + 1e-6)
        let s = sqrt(2.0 / 3.0 + 1e-6);
        assert!((y.data()[0] + 1.0 / s).abs() < 1e-12);
        assert!((y.data()[0] + 1.2247).abs() < 1e-3);
        assert_eq!(y.data()[1], 0.0);
        assert!((y.data()[2] - 1.2247).abs() < 1e-3);
    }

    #[test]
    fn normalized_input_is_a_fixed_point() {
        let x = Tensor::new(vec![4], vec![-1.0, -1.0, 1.0, 1.0]).unwrap();
        let y = layer_norm(&x, LN_EPS).unwrap();
        assert!(x.max_abs_diff(&y) < 1e-5);
    }

    #[test]
    fn empty_input_is_an_error() {
        let x = Tensor::zeros(vec![0]);
        assert!(layer_norm(&x, LN_EPS).is_err());
    }
}
