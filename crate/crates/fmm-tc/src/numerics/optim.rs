//! Bias-corrected Adam.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Optimizer state keyed by parameter name. Moment buffers mirror parameter
/// shapes; the step count increases once per `step` call.
pub struct OptimizerState {
    pub config: AdamConfig,
    step: u64,
    moments: BTreeMap<String, Moments>,
}

impl OptimizerState {
    pub fn new(config: AdamConfig) -> Self {
        OptimizerState {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One Adam update over the named parameters. Parameters without a
    /// gradient entry are left untouched and their moments are not advanced.
    pub fn step<F: Scalar>(
        &mut self,
        params: &mut BTreeMap<String, Tensor<F>>,
        grads: &BTreeMap<String, Tensor<F>>,
    ) -> Result<()> {
        for name in grads.keys() {
            if !params.contains_key(name) {
                return Err(Error::Graph(format!("gradient for unknown parameter `{name}`")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, grad) in grads {
            let param = params.get_mut(name).unwrap();
            if grad.shape() != param.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!(
                        "parameter `{name}`: grad {:?} vs param {:?}",
                        grad.shape(),
                        param.shape()
                    ),
                ));
            }
            let mom = self.moments.entry(name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; grad.numel()],
                v: vec![0.0; grad.numel()],
            });
            if mom.m.len() != grad.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("moment buffer for `{name}` has stale shape"),
                ));
            }
            for (i, p) in param.data_mut().iter_mut().enumerate() {
                let g = grad.data()[i].to_f64();
                mom.m[i] = c.beta1 * mom.m[i] + (1.0 - c.beta1) * g;
                mom.v[i] = c.beta2 * mom.v[i] + (1.0 - c.beta2) * g * g;
                let mhat = mom.m[i] / bc1;
                let vhat = mom.v[i] / bc2;
                let upd = c.learning_rate * mhat / (vhat.sqrt() + c.epsilon);
                *p = F::from_f64(p.to_f64() - upd);
            }
        }
        Ok(())
    }
}
