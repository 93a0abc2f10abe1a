//! Adam with linear warmup and stepped learning-rate decay.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::state::ModelState;
use crate::tensor::{Real, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub base_lr: f64,
    /// Multiplicative decay applied once per `decay_interval` steps.
    pub decay: f64,
    /// Steps per decay interval (the trainer passes one epoch's worth).
    pub decay_interval: usize,
    /// Linear warmup from 0 to 1 over this many steps.
    pub warmup_steps: usize,
}

impl OptimizerConfig {
    pub fn new(base_lr: f64, decay: f64, decay_interval: usize, warmup_steps: usize) -> Self {
        OptimizerConfig {
            base_lr,
            decay,
            decay_interval: decay_interval.max(1),
            warmup_steps,
        }
    }
}

#[derive(Debug)]
pub struct Optimizer<T: Real> {
    cfg: OptimizerConfig,
    step: usize,
    moments: BTreeMap<String, (Tensor<T>, Tensor<T>)>,
}

impl<T: Real> Optimizer<T> {
    pub fn new(cfg: OptimizerConfig) -> Self {
        Optimizer {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Effective learning rate at 1-based step `t`.
    pub fn effective_lr(&self, t: usize) -> f64 {
        let ramp = if self.cfg.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.cfg.warmup_steps as f64).min(1.0)
        };
        let intervals = (t - 1) / self.cfg.decay_interval;
        self.cfg.base_lr * ramp * self.cfg.decay.powi(intervals as i32)
    }

    /// One Adam update over all trainable parameters. Requires a fresh
    /// backward pass; consumes (zeroes) the gradients.
    pub fn step(&mut self, state: &mut ModelState<T>) -> Result<f64> {
        if !state.take_grads_fresh() {
            return Err(Error::state("optimizer step before backward"));
        }
        self.step += 1;
        let t = self.step;
        let lr = self.effective_lr(t);
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let one_m_b1 = T::from_f64(1.0 - ADAM_BETA1);
        let one_m_b2 = T::from_f64(1.0 - ADAM_BETA2);
        let bias1 = 1.0 - ADAM_BETA1.powi(t as i32);
        let bias2 = 1.0 - ADAM_BETA2.powi(t as i32);
        let eps = T::from_f64(ADAM_EPS);

        let names: Vec<String> = state
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            let p = state.get_mut(&name)?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())));
            let inv_b1 = T::from_f64(1.0 / bias1);
            let inv_b2 = T::from_f64(1.0 / bias2);
            let lr_t = T::from_f64(lr);
            for ((pv, g), (mv, vv)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + one_m_b1 * *g;
                *vv = b2 * *vv + one_m_b2 * *g * *g;
                let m_hat = *mv * inv_b1;
                let v_hat = *vv * inv_b2;
                *pv -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        state.zero_grads();
        Ok(lr)
    }
}
