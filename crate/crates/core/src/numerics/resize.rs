use alloc::vec;
use alloc::vec::Vec;

use super::Tensor;
use crate::math::floor;
use crate::{Error, Result};

/// Two-tap interpolation weights along one axis (half-pixel centers).
#[derive(Debug, Clone)]
struct AxisPlan {
    lo: Vec<usize>,
    hi: Vec<usize>,
    w_hi: Vec<f64>,
}

impl AxisPlan {
    fn new(input: usize, output: usize) -> Self {
        let scale = input as f64 / output as f64;
        let mut lo = Vec::with_capacity(output);
        let mut hi = Vec::with_capacity(output);
        let mut w_hi = Vec::with_capacity(output);
        for o in 0..output {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (floor(src) as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            lo.push(i0);
            hi.push(i1);
            w_hi.push(src - i0 as f64);
        }
        AxisPlan { lo, hi, w_hi }
    }
}

fn check(shape: &[usize], target: (usize, usize)) -> Result<(usize, usize, usize)> {
    if shape.len() != 3 {
        return Err(Error::shape("bilinear_resize expects a d×H×W tensor"));
    }
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    if h == 0 || w == 0 || target.0 == 0 || target.1 == 0 {
        return Err(Error::shape("bilinear_resize needs non-zero spatial dims"));
    }
    Ok((d, h, w))
}

/// Bilinear resize of a `d×H×W` map with align-corners disabled.
pub fn bilinear_resize(x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
    let (d, h, w) = check(x.shape(), target)?;
    let (th, tw) = target;
    if (th, tw) == (h, w) {
        return Ok(x.clone());
    }
    let py = AxisPlan::new(h, th);
    let px = AxisPlan::new(w, tw);
    let src = x.data();
    let mut out = vec![0.0; d * th * tw];
    for c in 0..d {
        let plane = &src[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * th * tw..(c + 1) * th * tw];
        for oy in 0..th {
            let (y0, y1, wy) = (py.lo[oy], py.hi[oy], py.w_hi[oy]);
            for ox in 0..tw {
                let (x0, x1, wx) = (px.lo[ox], px.hi[ox], px.w_hi[ox]);
                let top = plane[y0 * w + x0] * (1.0 - wx) + plane[y0 * w + x1] * wx;
                let bot = plane[y1 * w + x0] * (1.0 - wx) + plane[y1 * w + x1] * wx;
                dst[oy * tw + ox] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    Tensor::new(vec![d, th, tw], out)
}

/// Adjoint of [`bilinear_resize`]: maps `dL/dout` (`d×H'×W'`) back to
/// `dL/dx` (`d×H×W`).
pub fn bilinear_resize_backward(dy: &Tensor, input_hw: (usize, usize)) -> Result<Tensor> {
    let (d, th, tw) = check(dy.shape(), input_hw)?;
    let (h, w) = input_hw;
    if (th, tw) == (h, w) {
        return Ok(dy.clone());
    }
    let py = AxisPlan::new(h, th);
    let px = AxisPlan::new(w, tw);
    let g = dy.data();
    let mut out = vec![0.0; d * h * w];
    for c in 0..d {
        let gp = &g[c * th * tw..(c + 1) * th * tw];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for oy in 0..th {
            let (y0, y1, wy) = (py.lo[oy], py.hi[oy], py.w_hi[oy]);
            for ox in 0..tw {
                let (x0, x1, wx) = (px.lo[ox], px.hi[ox], px.w_hi[ox]);
                let v = gp[oy * tw + ox];
                dst[y0 * w + x0] += v * (1.0 - wy) * (1.0 - wx);
                dst[y0 * w + x1] += v * (1.0 - wy) * wx;
                dst[y1 * w + x0] += v * wy * (1.0 - wx);
                dst[y1 * w + x1] += v * wy * wx;
            }
        }
    }
    Tensor::new(vec![d, h, w], out)
}
