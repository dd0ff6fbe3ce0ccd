//! AdamW and the deterministic training loop.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::checkpoint::OptimizerState;
use crate::losses::{LossReport, LossWeights};
use crate::math::sqrt;
use crate::model::{Sample, Student};
use crate::numerics::{Grads, ParameterStore};
use crate::rng::{stream, SliceRandom};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Run this many steps instead of finishing `epochs`.
    pub steps: Option<usize>,
    /// Global index of the first step, for resuming; batches continue where
    /// a run that long would have left off.
    pub start_step: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Global-norm gradient clipping; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 5e-4,
            weight_decay: 1e-7,
            epochs: 5,
            batch_size: 16,
            steps: None,
            start_step: 0,
            seed: 0,
            weights: LossWeights::default(),
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::config(format!("lr must be finite and ≥ 0, got {}", self.lr)));
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("weight_decay must be ≥ 0"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!("batch_size must be ≥ 2, got {}", self.batch_size)));
        }
        if let Some(c) = self.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::config("grad_clip must be > 0"));
            }
        }
        Ok(())
    }

    /// One past the last global step run over `n_samples` samples.
    pub fn end_step(&self, n_samples: usize) -> usize {
        match self.steps {
            Some(n) => self.start_step + n,
            None => self.epochs * (n_samples / self.batch_size.max(1)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments aligned with a store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub params: AdamParams,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, p)| vec![0.0; p.tensor.numel()]).collect();
        AdamState {
            step: 0,
            params: AdamParams::default(),
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// Moments of trainable parameters, keyed by name.
    pub fn export(&self, store: &ParameterStore) -> OptimizerState {
        let mut out = OptimizerState {
            step: self.step,
            names: Vec::new(),
            m: Vec::new(),
            v: Vec::new(),
        };
        for (id, p) in store.iter() {
            if p.trainable {
                out.names.push(p.name.clone());
                out.m.push(self.m[id.index()].clone());
                out.v.push(self.v[id.index()].clone());
            }
        }
        out
    }

    pub fn import(store: &ParameterStore, state: &OptimizerState) -> Result<Self> {
        let mut s = AdamState::new(store);
        s.step = state.step;
        for ((name, m), v) in state.names.iter().zip(&state.m).zip(&state.v) {
            let id = store
                .id(name)
                .ok_or_else(|| Error::UnknownParameter(name.clone()))?;
            let n = store.tensor(id).numel();
            if m.len() != n || v.len() != n {
                return Err(Error::shape(format!("optimizer moments for `{name}` have the wrong length")));
            }
            s.m[id.index()] = m.clone();
            s.v[id.index()] = v.clone();
        }
        Ok(s)
    }
}

/// Decoupled weight decay `θ ← θ(1 − lr·wd)`, then a bias-corrected Adam
/// step. Frozen parameters are left untouched.
pub fn adamw_step(
    store: &mut ParameterStore,
    grads: &Grads,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !grads.all_finite() {
        return Err(Error::NonFinite("gradient".into()));
    }
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(Error::shape("optimizer state does not match the store"));
    }
    state.step += 1;
    let AdamParams { beta1, beta2, eps } = state.params;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(beta1, f64::from(t));
    let c2 = 1.0 - libm::pow(beta2, f64::from(t));
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect();
    for id in ids {
        let g = grads.get(id);
        let m = &mut state.m[id.index()];
        let v = &mut state.v[id.index()];
        let theta = store.data_mut(id);
        for i in 0..theta.len() {
            theta[i] *= 1.0 - lr * weight_decay;
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            theta[i] -= lr * mh / (sqrt(vh) + eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    /// Loss at the parameters before this step's update.
    pub report: LossReport,
    pub grad_norm: f64,
}

/// Sample order for one epoch, full batches only.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &format!("shuffle/epoch{epoch}")));
    order
        .chunks_exact(batch_size)
        .map(<[usize]>::to_vec)
        .collect()
}

/// Runs AdamW over `samples`, calling `on_step` after each update.
pub fn train(
    student: &Student,
    store: &mut ParameterStore,
    samples: &[Sample],
    cfg: &TrainConfig,
    state: &mut AdamState,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    if cfg.batch_size > samples.len() {
        return Err(Error::config(format!(
            "batch_size {} exceeds the {} available samples",
            cfg.batch_size,
            samples.len()
        )));
    }
    let per_epoch = samples.len() / cfg.batch_size;
    let end = cfg.end_step(samples.len());
    let mut logs = Vec::with_capacity(end.saturating_sub(cfg.start_step));
    let mut order: Option<(usize, Vec<Vec<usize>>)> = None;
    for step in cfg.start_step..end {
        let epoch = step / per_epoch;
        if order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            order = Some((epoch, epoch_batches(samples.len(), cfg.batch_size, cfg.seed, epoch)));
        }
        let idx = &order.as_ref().expect("filled above").1[step % per_epoch];
        let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
        let (report, mut grads) = student.batch_loss_grad(store, &batch, cfg.weights)?;
        if !report.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let grad_norm = grads.global_norm();
        if let Some(c) = cfg.grad_clip {
            if grad_norm > c {
                grads.scale(c / grad_norm);
            }
        }
        adamw_step(store, &grads, state, cfg.lr, cfg.weight_decay)?;
        let log = StepLog {
            step,
            epoch,
            report,
            grad_norm,
        };
        on_step(&log);
        logs.push(log);
    }
    Ok(logs)
}
