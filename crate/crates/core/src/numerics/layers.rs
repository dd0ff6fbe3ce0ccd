use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, Grads, ParamId, ParameterStore, Tensor};
use crate::math::{erf, exp, sqrt, INV_SQRT_2PI, SQRT_2};
use crate::rng::{normal, StreamRng};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LinearInit {
    /// Weights drawn from N(0, std²), bias zero.
    Normal(f64),
    /// Weights drawn from N(0, 1/fan_in), bias zero.
    FanIn,
    Zeros,
}

/// Affine map applied row-wise: `y = x Wᵀ + b`, `W` stored `out×in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub inp: usize,
    pub out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParameterStore,
        name: &str,
        inp: usize,
        out: usize,
        bias: bool,
        init: LinearInit,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        let std = match init {
            LinearInit::Normal(s) => s,
            LinearInit::FanIn => 1.0 / sqrt(inp as f64),
            LinearInit::Zeros => 0.0,
        };
        let w = Tensor::from_fn(vec![out, inp], |_| {
            if std == 0.0 {
                0.0
            } else {
                std * normal(rng)
            }
        });
        let weight = store.add(&format!("{name}.weight"), w, true)?;
        let bias = if bias {
            Some(store.add(&format!("{name}.bias"), Tensor::zeros(vec![out]), true)?)
        } else {
            None
        };
        Ok(Linear {
            weight,
            bias,
            inp,
            out,
        })
    }

    pub fn forward(&self, store: &ParameterStore, x: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(x.len(), rows * self.inp);
        let mut y = vec![0.0; rows * self.out];
        gemm(
            rows,
            self.inp,
            self.out,
            x,
            false,
            store.data(self.weight),
            true,
            &mut y,
            false,
        );
        if let Some(b) = self.bias {
            let b = store.data(b);
            for row in y.chunks_mut(self.out) {
                for (v, bb) in row.iter_mut().zip(b) {
                    *v += bb;
                }
            }
        }
        y
    }

    /// Accumulates weight/bias gradients and returns `dL/dx`.
    pub fn backward(
        &self,
        store: &ParameterStore,
        grads: &mut Grads,
        x: &[f64],
        rows: usize,
        dy: &[f64],
    ) -> Vec<f64> {
        self.backward_params(grads, x, rows, dy);
        self.backward_input(store, rows, dy)
    }

    pub fn backward_params(&self, grads: &mut Grads, x: &[f64], rows: usize, dy: &[f64]) {
        gemm(
            self.out,
            rows,
            self.inp,
            dy,
            true,
            x,
            false,
            grads.get_mut(self.weight),
            true,
        );
        if let Some(b) = self.bias {
            let gb = grads.get_mut(b);
            for row in dy.chunks(self.out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
    }

    pub fn backward_input(&self, store: &ParameterStore, rows: usize, dy: &[f64]) -> Vec<f64> {
        let mut dx = vec![0.0; rows * self.inp];
        gemm(
            rows,
            self.out,
            self.inp,
            dy,
            false,
            store.data(self.weight),
            false,
            &mut dx,
            false,
        );
        dx
    }
}

/// Exact (erf) GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / SQRT_2)) + x * INV_SQRT_2PI * exp(-0.5 * x * x)
}

pub fn gelu_backward(pre: &[f64], dy: &[f64]) -> Vec<f64> {
    pre.iter().zip(dy).map(|(&x, &d)| d * gelu_grad(x)).collect()
}

/// Scales `x` to unit L2 norm; returns the normalized vector and the norm.
pub fn l2_normalize(x: &[f64]) -> (Vec<f64>, f64) {
    let norm = sqrt(x.iter().map(|v| v * v).sum::<f64>()).max(1e-12);
    (x.iter().map(|v| v / norm).collect(), norm)
}

/// Backward of [`l2_normalize`] given its output `y` and the input norm.
pub fn l2_normalize_backward(y: &[f64], norm: f64, dy: &[f64]) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(dy)
        .map(|(&yi, &di)| (di - yi * dot) / norm)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn l2_normalize_gives_unit_norm() {
        let (y, n) = l2_normalize(&[3.0, 4.0]);
        assert!((n - 5.0).abs() < 1e-15);
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] - 0.8).abs() < 1e-15);
    }
}
