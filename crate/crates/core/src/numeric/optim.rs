use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::params::ParamStore;

/// Moment estimates and hyperparameters of the ADAM optimizer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: BTreeMap<String, Vec<f64>>,
    pub second_moment: BTreeMap<String, Vec<f64>>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            step_count: 0,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl AdamState {
    pub fn new(beta1: f64, beta2: f64, epsilon: f64) -> Result<Self> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !in_unit(beta1) || !in_unit(beta2) || epsilon <= 0.0 {
            return Err(Error::Domain(format!(
                "invalid ADAM hyperparameters beta1={beta1} beta2={beta2} epsilon={epsilon}"
            )));
        }
        Ok(AdamState {
            beta1,
            beta2,
            epsilon,
            ..AdamState::default()
        })
    }
}

/// One bias-corrected ADAM update over every parameter holding a gradient.
///
/// Gradients are consumed: all grad slots are cleared afterwards. Nothing is
/// modified when any gradient is non-finite.
pub fn adam_step(params: &mut ParamStore, state: &mut AdamState, lr: f64) -> Result<()> {
    for (name, t) in params.iter() {
        if let Some(g) = t.grad() {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} at index {pos} of parameter '{name}'",
                    g[pos]
                )));
            }
        }
    }
    state.step_count += 1;
    let t = state.step_count as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    for (name, tensor) in params.iter_mut() {
        let Some(g) = tensor.grad().map(<[f64]>::to_vec) else {
            continue;
        };
        let n = g.len();
        let m = state.first_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.second_moment.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
        if m.len() != n || v.len() != n {
            return Err(Error::dim("adam_step", &[tensor.shape(), &[m.len()]]));
        }
        let values = tensor.values_mut();
        for i in 0..n {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    params.zero_grads();
    Ok(())
}
