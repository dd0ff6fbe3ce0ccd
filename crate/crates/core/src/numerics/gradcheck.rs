//! Central finite differences as an independent check on analytic gradients.

use alloc::string::String;
use alloc::vec::Vec;

use super::{Grads, ParameterStore};
use crate::math::sqrt;
use crate::rng::{stream, SliceRandom};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FdOptions {
    /// Central-difference half step `h`.
    pub step: f64,
    /// Coordinates probed per parameter tensor; `None` probes all of them.
    /// When sampling, the coordinate with the largest analytic magnitude is
    /// always included.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
    /// Smallest denominator in the relative error, so that entries whose true
    /// gradient is zero are judged by rounding-level absolute error.
    pub rel_floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        FdOptions {
            step: 1e-3,
            coords_per_param: None,
            seed: 0,
            rel_floor: 1e-5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradCheck {
    pub name: String,
    pub trainable: bool,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradReport {
    pub entries: Vec<ParamGradCheck>,
}

impl GradReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn max_abs_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_abs_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&ParamGradCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    pub fn checked(&self) -> usize {
        self.entries.iter().map(|e| e.checked).sum()
    }
}

fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Compares `analytic` against `(L(θ+h) − L(θ−h)) / 2h` per scalar.
///
/// Frozen parameters are excluded from the update set: both their analytic
/// and numeric gradients are reported as exactly zero.
pub fn finite_difference_gradient<F>(
    loss_fn: F,
    store: &ParameterStore,
    analytic: &Grads,
    opts: &FdOptions,
) -> Result<GradReport>
where
    F: Fn(&ParameterStore) -> Result<f64>,
{
    if opts.step.is_nan() || opts.step <= 0.0 {
        return Err(Error::config("finite-difference step must be > 0"));
    }
    if analytic.len() != store.len() {
        return Err(Error::shape("gradient buffers do not match the store"));
    }
    let mut work = store.clone();
    let mut rng = stream(opts.seed, "gradcheck/coords");
    let mut entries = Vec::with_capacity(store.len());
    for (id, param) in store.iter() {
        if !param.trainable {
            entries.push(ParamGradCheck {
                name: param.name.clone(),
                trainable: false,
                checked: 0,
                max_abs_err: 0.0,
                max_rel_err: 0.0,
                analytic_norm: 0.0,
                numeric_norm: 0.0,
            });
            continue;
        }
        let g = analytic.get(id);
        let n = g.len();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => {
                let top = (0..n)
                    .max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs()))
                    .unwrap_or(0);
                let mut rest: Vec<usize> = (0..n).filter(|&i| i != top).collect();
                rest.shuffle(&mut rng);
                core::iter::once(top)
                    .chain(rest.into_iter().take(k.saturating_sub(1)))
                    .collect()
            }
            _ => (0..n).collect(),
        };
        let mut e = ParamGradCheck {
            name: param.name.clone(),
            trainable: true,
            checked: coords.len(),
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            analytic_norm: 0.0,
            numeric_norm: 0.0,
        };
        for &i in &coords {
            let orig = work.data(id)[i];
            work.data_mut(id)[i] = orig + opts.step;
            let lp = loss_fn(&work)?;
            work.data_mut(id)[i] = orig - opts.step;
            let lm = loss_fn(&work)?;
            work.data_mut(id)[i] = orig;
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::NonFinite(alloc::format!("loss while probing {}", param.name)));
            }
            let num = (lp - lm) / (2.0 * opts.step);
            let a = g[i];
            e.max_abs_err = e.max_abs_err.max((a - num).abs());
            e.max_rel_err = e.max_rel_err.max(rel_err(a, num, opts.rel_floor));
            e.analytic_norm += a * a;
            e.numeric_norm += num * num;
        }
        e.analytic_norm = sqrt(e.analytic_norm);
        e.numeric_norm = sqrt(e.numeric_norm);
        entries.push(e);
    }
    Ok(GradReport { entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;
    use alloc::vec;

    fn half_sq(s: &ParameterStore) -> Result<f64> {
        Ok(s.iter()
            .map(|(_, p)| 0.5 * p.tensor.data().iter().map(|v| v * v).sum::<f64>())
            .sum())
    }

    #[test]
    fn quadratic_gradient_is_theta() {
        let mut s = ParameterStore::new();
        let a = s
            .add("a", Tensor::new(vec![3], vec![1.5, -2.0, 0.25]).unwrap(), true)
            .unwrap();
        let b = s.add("b", Tensor::new(vec![1], vec![4.0]).unwrap(), false).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.get_mut(a).copy_from_slice(s.data(a));
        let r = finite_difference_gradient(half_sq, &s, &g, &FdOptions::default()).unwrap();
        assert!(r.max_rel_err() < 1e-9);
        let frozen = &r.entries[b.index()];
        assert!(!frozen.trainable);
        assert_eq!(frozen.numeric_norm, 0.0);
        assert_eq!(frozen.analytic_norm, 0.0);
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mut s = ParameterStore::new();
        s.add("a", Tensor::zeros(vec![1]), true).unwrap();
        let g = Grads::zeros_like(&s);
        let r = finite_difference_gradient(|_| Ok(f64::NAN), &s, &g, &FdOptions::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn detects_a_wrong_gradient() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Tensor::filled(vec![2], 1.0), true).unwrap();
        let mut g = Grads::zeros_like(&s);
        g.get_mut(a).copy_from_slice(&[1.0, 2.0]);
        let r = finite_difference_gradient(half_sq, &s, &g, &FdOptions::default()).unwrap();
        assert!(r.max_rel_err() > 0.4);
    }
}
