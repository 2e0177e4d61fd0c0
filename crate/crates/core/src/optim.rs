//! AdamW with decoupled weight decay, plus the linear warmup/decay schedule.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{GradSet, ParamSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Per-parameter moments and the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState<T> {
    pub config: AdamWConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub(crate) moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Scalar> AdamWState<T> {
    pub fn new(config: AdamWConfig) -> Self {
        AdamWState {
            config,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    /// First and second moment of `name`, if it has been updated.
    pub fn moments(&self, name: &str) -> Option<(&[T], &[T])> {
        self.moments.get(name).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }

    pub fn moment_names(&self) -> impl Iterator<Item = &str> {
        self.moments.keys().map(String::as_str)
    }

    pub(crate) fn insert_moments(&mut self, name: String, m: Vec<T>, v: Vec<T>) {
        self.moments.insert(name, (m, v));
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut [&mut ParamSet<T>], grads: &GradSet<T>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, grads, lr)
    }

    /// One update at learning rate `lr`:
    /// `p ← p·(1 − lr·λ) − lr · m̂ / (√v̂ + ε)` with bias-corrected moments
    /// at the post-increment step count.
    pub fn step_with_lr(&mut self, params: &mut [&mut ParamSet<T>], grads: &GradSet<T>, lr: f64) -> Result<()> {
        for set in params.iter() {
            for (name, p) in set.iter() {
                let g = grads.get(name).ok_or_else(|| Error::Config(format!("no gradient for `{name}`")))?;
                if g.len() != p.len() {
                    return Err(Error::dim("adamw_step", p.shape(), &[g.len()]));
                }
                if let Some((m, _)) = self.moments.get(name) {
                    if m.len() != p.len() {
                        return Err(Error::dim("adamw_step", p.shape(), &[m.len()]));
                    }
                }
            }
        }

        self.t += 1;
        let c = self.config;
        let t = self.t as i32;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let bc1 = T::from_f64_lossy(1.0 - c.beta1.powi(t));
        let bc2 = T::from_f64_lossy(1.0 - c.beta2.powi(t));
        let eps = T::from_f64_lossy(c.eps);
        let lr_t = T::from_f64_lossy(lr);
        let decay = T::from_f64_lossy(1.0 - lr * c.weight_decay);

        for set in params.iter_mut() {
            for (name, p) in set.iter_mut() {
                let g = grads.get(name).expect("checked above");
                let (m, v) = self
                    .moments
                    .entry(name.to_string())
                    .or_insert_with(|| (vec![T::zero(); g.len()], vec![T::zero(); g.len()]));
                for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                    *mv = b1 * *mv + (one - b1) * gv;
                    *vv = b2 * *vv + (one - b2) * gv * gv;
                    let mhat = *mv / bc1;
                    let vhat = *vv / bc2;
                    *pv = *pv * decay - lr_t * mhat / (vhat.sqrt() + eps);
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup over the first `warmup_frac` of `total` steps, then linear
/// decay to zero. `step` is 0-based.
pub fn linear_schedule(base_lr: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    if total == 0 {
        return base_lr;
    }
    let warmup = (warmup_frac * total as f64).round() as usize;
    if step < warmup {
        base_lr * (step + 1) as f64 / warmup as f64
    } else {
        let remaining = total.saturating_sub(step) as f64;
        base_lr * remaining / (total - warmup).max(1) as f64
    }
}
