use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::supernet::ParamStore;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments of one tensor plus its own step count.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u32,
}

/// One bias-corrected Adam update of `params` in place.
///
/// `weight_decay` adds `wd * param` to the gradient before the moments.
pub fn optimiser_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, lr: f64, weight_decay: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::dim(
            "optimiser_step",
            format!("{} params, {} grads", params.len(), grads.len()),
        ));
    }
    if state.t == 0 {
        state.m = vec![0.0; params.len()];
        state.v = vec![0.0; params.len()];
    } else if state.m.len() != params.len() {
        return Err(Error::dim("optimiser_step", "state length differs from params"));
    }
    state.t += 1;
    let c1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let c2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i] + weight_decay * params[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
    Ok(())
}

/// Adam over named tensors. Only keys that receive a gradient are touched,
/// so tensors outside the current single path keep both their values and
/// their moments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    state: BTreeMap<String, AdamState>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            state: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(String, Vec<f64>)]) -> Result<()> {
        for (key, g) in grads {
            let p = store
                .get_mut(key)
                .ok_or_else(|| Error::Contract(format!("gradient for unknown parameter '{key}'")))?;
            let st = self.state.entry(key.clone()).or_default();
            optimiser_step(p.data_mut(), g, st, self.lr, self.weight_decay)?;
        }
        Ok(())
    }

    pub fn state(&self, key: &str) -> Option<&AdamState> {
        self.state.get(key)
    }
}
