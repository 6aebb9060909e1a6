//! AdamW: bias-corrected Adam moments plus decoupled weight decay.

use serde::{Deserialize, Serialize};

use super::params::{GradBuffer, ParamStore};
use super::NnError;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Per-parameter first/second moment buffers and the step counter.
#[derive(Clone)]
pub struct AdamWState {
    pub(crate) step: u64,
    pub(crate) m: Vec<Vec<f64>>,
    pub(crate) v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn zeros(store: &ParamStore) -> Self {
        AdamWState {
            step: 0,
            m: store.iter().map(|p| vec![0.0; p.tensor().len()]).collect(),
            v: store.iter().map(|p| vec![0.0; p.tensor().len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

pub struct AdamW {
    pub config: AdamWConfig,
    pub state: AdamWState,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        AdamW {
            config,
            state: AdamWState::zeros(store),
        }
    }

    pub fn resume(config: AdamWConfig, state: AdamWState) -> Self {
        AdamW { config, state }
    }

    /// One update. Any non-finite gradient aborts before touching weights
    /// or moments and reports the offending parameter.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradBuffer) -> Result<(), NnError> {
        for (idx, buf) in grads.bufs().iter().enumerate() {
            if buf.iter().any(|v| !v.is_finite()) {
                return Err(NnError::NonFiniteGradient(
                    store.get(super::params::ParamId(idx)).name().to_string(),
                ));
            }
        }
        self.state.step += 1;
        let t = self.state.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        for (idx, gbuf) in grads.bufs().iter().enumerate() {
            let m = &mut self.state.m[idx];
            let v = &mut self.state.v[idx];
            let tensor = store.tensor_mut(idx);
            let data = tensor.data_mut();
            for i in 0..data.len() {
                let g = gbuf[i];
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                // decoupled decay uses the pre-step weight
                let decay = c.learning_rate * c.weight_decay * data[i];
                data[i] -= c.learning_rate * m_hat / (v_hat.sqrt() + c.epsilon) + decay;
            }
        }
        Ok(())
    }
}
