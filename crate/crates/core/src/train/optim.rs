use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Optimiser hyper-parameters and the run schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// When set, the run is exactly this many optimiser steps (however many
    /// epochs that takes) instead of `epochs` passes.
    pub max_steps: Option<usize>,
    pub seed: u64,
    /// Write a checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Global L2 gradient-norm clip.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 2e-4,
            lr_min: 1e-6,
            weight_decay: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 1000,
            max_steps: None,
            seed: 0,
            checkpoint_every: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr0) {
            return bad(format!("need 0 < lr_min ≤ lr0, got {} and {}", self.lr_min, self.lr0));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad(format!("bad Adam constants β1={} β2={} eps={}", self.beta1, self.beta2, self.eps));
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be ≥ 0, got {}", self.weight_decay));
        }
        if matches!(self.clip_norm, Some(c) if c <= 0.0) {
            return bad("clip_norm must be positive".into());
        }
        Ok(())
    }

    /// Optimiser steps in one pass over `n` samples (last batch may be short).
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size)
    }

    pub fn total_steps(&self, n: usize) -> usize {
        self.max_steps.unwrap_or(self.epochs * self.steps_per_epoch(n))
    }
}

/// `lr_min + ½(lr0 − lr_min)(1 + cos(π·step/total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64, lr_min: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond schedule of {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(lr0);
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok(lr_min + 0.5 * (lr0 - lr_min) * (1.0 + phase.cos()))
}

/// Adam moments per parameter slot (`None` for buffers and untouched
/// parameters) plus the completed step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub m: Vec<Option<Tensor<T>>>,
    pub v: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        OptimizerState {
            step: 0,
            m: vec![None; store.len()],
            v: vec![None; store.len()],
        }
    }
}

/// Global L2 norm of `grads`.
pub fn grad_norm<T: Scalar>(grads: &[(ParamId, Tensor<T>)]) -> f64 {
    grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|&v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt()
}

/// One decoupled-weight-decay Adam update of every parameter in `grads`.
/// Buffers are rejected.
pub fn adamw_step<T: Scalar>(
    store: &mut ParamStore<T>,
    grads: &[(ParamId, Tensor<T>)],
    state: &mut OptimizerState<T>,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != store.len() {
        return Err(Error::InvalidArgument(format!(
            "optimizer state has {} slots, store has {} parameters",
            state.m.len(),
            store.len()
        )));
    }
    for (id, g) in grads {
        if !store.is_trainable(*id) {
            return Err(Error::InvalidArgument(format!("{} is a buffer", store.name(*id))));
        }
        if g.shape() != store.value(*id).shape() {
            return Err(Error::shape(
                "adamw_step",
                format!("gradient {:?} for {} {:?}", g.shape(), store.name(*id), store.value(*id).shape()),
            ));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let [b1t, b2t, lrt, eps] = [b1, b2, lr, cfg.eps].map(T::lit);
    let decay = T::lit(1.0 - lr * cfg.weight_decay);
    let (c1, c2) = (T::lit(c1), T::lit(c2));
    for (id, g) in grads {
        let i = id.index();
        let m = state.m[i].get_or_insert_with(|| g.zeros_like());
        let v = state.v[i].get_or_insert_with(|| g.zeros_like());
        let theta = store.value_mut(*id);
        for (((p, &gi), mi), vi) in theta.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *mi = b1t * *mi + (T::one() - b1t) * gi;
            *vi = b2t * *vi + (T::one() - b2t) * gi * gi;
            let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
            *p = *p * decay - lrt * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamBuilder;

    fn store() -> (ParamStore<f64>, ParamId) {
        let mut pb = ParamBuilder::new(0);
        let w = pb.uniform("w", &[3, 2], 1.0).unwrap();
        pb.buffer("stat", Tensor::ones(vec![2])).unwrap();
        (pb.finish(), w)
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 300, 2e-4, 1e-6).unwrap(), 2e-4);
        assert!((cosine_lr(300, 300, 2e-4, 1e-6).unwrap() - 1e-6).abs() < 1e-18);
        assert!((cosine_lr(150, 300, 2e-4, 1e-6).unwrap() - 1.005e-4).abs() < 1e-15);
        assert!(cosine_lr(301, 300, 2e-4, 1e-6).is_err());
    }

    #[test]
    fn zero_gradient_cases() {
        let (mut s, w) = store();
        let before = s.value(w).clone();
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(&s);
        adamw_step(&mut s, &[(w, before.zeros_like())], &mut st, 1e-3, &cfg).unwrap();
        assert_eq!(s.value(w), &before);

        let cfg = TrainConfig::default();
        let (lr, mut st) = (1e-2, OptimizerState::new(&s));
        adamw_step(&mut s, &[(w, before.zeros_like())], &mut st, lr, &cfg).unwrap();
        let expect = before.map(|p| p * (1.0 - lr * 0.05));
        assert_eq!(s.value(w), &expect);
    }

    #[test]
    fn first_step_is_signed_lr() {
        let (mut s, w) = store();
        let before = s.value(w).clone();
        let g = Tensor::from_fn(vec![3, 2], |i| if i % 2 == 0 { 0.3 } else { -2.0 });
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut st = OptimizerState::new(&s);
        adamw_step(&mut s, &[(w, g.clone())], &mut st, 1e-3, &cfg).unwrap();
        for ((a, b), gi) in s.value(w).data().iter().zip(before.data()).zip(g.data()) {
            let expect = -1e-3 * gi / (gi.abs() + 1e-8);
            assert!((a - b - expect).abs() < 1e-15);
        }
        assert_eq!(st.step, 1);
    }

    #[test]
    fn rejects_bad_input() {
        let (mut s, w) = store();
        let mut st = OptimizerState::new(&s);
        let cfg = TrainConfig::default();
        assert!(adamw_step(&mut s, &[(w, Tensor::zeros(vec![2, 3]))], &mut st, 1e-3, &cfg).is_err());
        let stat = s.find("stat").unwrap();
        assert!(adamw_step(&mut s, &[(stat, Tensor::zeros(vec![2]))], &mut st, 1e-3, &cfg).is_err());
        assert!(TrainConfig { lr_min: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
    }
}
