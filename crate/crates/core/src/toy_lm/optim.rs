//! Adam with decoupled weight decay.
//!
//! For every parameter `p` with gradient `g`, at step `t` (1-based):
//!
//! ```text
//! p = p - lr * wd * p            (rank-2 tensors only)
//! m = b1 * m + (1 - b1) * g
//! v = b2 * v + (1 - b2) * g^2
//! m_hat = m / (1 - b1^t)
//! v_hat = v / (1 - b2^t)
//! p = p - lr * m_hat / (sqrt(v_hat) + eps)
//! ```
//!
//! Moments are kept in `f32`; the bias-correction factors are computed in
//! `f64` and rounded once per step.

use serde::{Deserialize, Serialize};

use crate::checkpoint::{check_compat, TensorMap};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            learning_rate: 1e-3,
            weight_decay: 0.01,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    /// The large-model settings: learning rate 3e-5, batch size 128.
    pub fn large_model() -> Self {
        Self {
            learning_rate: 3e-5,
            batch_size: 128,
            ..Self::default()
        }
    }

    /// Accepts `learning_rate = 0` so null updates can be exercised.
    pub fn validate(&self) -> Result<()> {
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidConfig(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("eps must be > 0 and weight_decay >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Parameters plus optimizer moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: TensorMap,
    pub first_moments: TensorMap,
    pub second_moments: TensorMap,
    pub step_count: u64,
}

impl TrainState {
    /// Fresh state with zeroed moments.
    pub fn new(params: TensorMap) -> Self {
        let mut zeros = params.clone();
        for (_, t) in zeros.iter_mut() {
            t.data_mut().fill(0.0);
        }
        Self {
            first_moments: zeros.clone(),
            second_moments: zeros,
            params,
            step_count: 0,
        }
    }
}

/// Applies one update in place. Weight decay touches rank-2 tensors only
/// (embeddings and linear weights), not biases or layer-norm parameters.
pub fn adamw_step(state: &mut TrainState, grads: &TensorMap, opt: &OptimizerConfig) -> Result<()> {
    check_compat(&state.params, grads).into_result()?;
    check_compat(&state.params, &state.first_moments).into_result()?;
    check_compat(&state.params, &state.second_moments).into_result()?;

    state.step_count += 1;
    let t = state.step_count as i32;
    let lr = opt.learning_rate as f32;
    let b1 = opt.beta1 as f32;
    let b2 = opt.beta2 as f32;
    let eps = opt.eps as f32;
    let bc1 = (1.0 - opt.beta1.powi(t)) as f32;
    let bc2 = (1.0 - opt.beta2.powi(t)) as f32;
    let decay = (1.0 - opt.learning_rate * opt.weight_decay) as f32;

    let moments = state.first_moments.iter_mut().zip(state.second_moments.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in state.params.iter_mut().zip(grads.iter()).zip(moments) {
        let decays = p.shape().len() == 2;
        let g = g.data();
        let m = m.data_mut();
        let v = v.data_mut();
        for (i, pi) in p.data_mut().iter_mut().enumerate() {
            if decays {
                *pi *= decay;
            }
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *pi -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
