//! AdamW with bias correction and decoupled weight decay.

use std::collections::BTreeMap;

use crate::nn::tape::{ParamStore, Parameter};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
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
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step_count: u64,
}

impl AdamState {
    pub fn for_param(p: &Parameter) -> Self {
        AdamState {
            m: Tensor::zeros(p.value.shape()),
            v: Tensor::zeros(p.value.shape()),
            step_count: 0,
        }
    }
}

/// One update from the parameter's accumulated gradient.
pub fn adamw_step(param: &mut Parameter, state: &mut AdamState, cfg: &AdamWConfig) {
    assert_eq!(
        param.value.shape(),
        state.m.shape(),
        "adamw_step: state shape mismatch for {}",
        param.name
    );
    state.step_count += 1;
    let t = state.step_count as f64;
    let bc1 = 1.0 - cfg.beta1.powf(t);
    let bc2 = 1.0 - cfg.beta2.powf(t);
    let pd = param.value.data_mut();
    let gd = param.grad.data();
    let md = state.m.data_mut();
    let vd = state.v.data_mut();
    for i in 0..pd.len() {
        let g = gd[i];
        md[i] = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * g;
        vd[i] = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * pd[i]);
    }
}

/// Optimizer over a whole store; states are keyed by parameter name and
/// created lazily, iteration order is the store's sorted order.
pub struct AdamW {
    pub cfg: AdamWConfig,
    states: BTreeMap<String, AdamState>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        AdamW {
            cfg,
            states: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore) {
        for (name, param) in store.iter_mut() {
            let state = self
                .states
                .entry(name.clone())
                .or_insert_with(|| AdamState::for_param(param));
            adamw_step(param, state, &self.cfg);
        }
    }
}
