use serde::{Deserialize, Serialize};

use super::param::{ParamId, ParamStore};
use super::{c, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
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
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Per-parameter moment estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

/// Adam with decoupled weight decay over a fixed set of parameters.
#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub config: AdamWConfig,
    params: Vec<ParamId>,
    state: Vec<MomentState<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(config: AdamWConfig, store: &ParamStore<T>, params: Vec<ParamId>) -> Self {
        let state = params
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                MomentState {
                    m: vec![T::zero(); n],
                    v: vec![T::zero(); n],
                    step: 0,
                }
            })
            .collect();
        AdamW { config, params, state }
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    pub fn state(&self) -> &[MomentState<T>] {
        &self.state
    }

    pub fn restore_state(&mut self, state: Vec<MomentState<T>>) -> Result<()> {
        if state.len() != self.state.len()
            || state.iter().zip(&self.state).any(|(a, b)| a.m.len() != b.m.len() || a.v.len() != b.v.len())
        {
            return Err(Error::Format("optimizer state does not match parameter layout".into()));
        }
        self.state = state;
        Ok(())
    }

    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(store, lr)
    }

    /// One update at an explicit learning rate. Consumes the gradients.
    pub fn step_with_lr(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if let Some(&id) = self.params.iter().find(|&&id| store.get(id).grad.is_none()) {
            return Err(Error::Usage(format!(
                "optimizer step without a gradient for parameter {}",
                store.get(id).name()
            )));
        }
        let cfg = self.config;
        let (b1, b2): (T, T) = (c(cfg.beta1), c(cfg.beta2));
        let eps: T = c(cfg.eps);
        for (&id, st) in self.params.iter().zip(self.state.iter_mut()) {
            let p = store.get_mut(id);
            let grad = p.grad.take().expect("checked above");
            st.step += 1;
            let bc1: T = c(1.0 - cfg.beta1.powi(st.step as i32));
            let bc2: T = c(1.0 - cfg.beta2.powi(st.step as i32));
            let lr_t: T = c(lr);
            let decay: T = c(1.0 - lr * cfg.weight_decay);
            let value = p.value_mut();
            for i in 0..value.len() {
                let g = grad[i];
                st.m[i] = b1 * st.m[i] + (T::one() - b1) * g;
                st.v[i] = b2 * st.v[i] + (T::one() - b2) * g * g;
                let mhat = st.m[i] / bc1;
                let vhat = st.v[i] / bc2;
                value[i] = value[i] * decay - lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
