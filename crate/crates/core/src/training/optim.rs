use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamGrads, ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
}

/// Adam with decoupled weight decay:
/// `θ ← θ·(1 − lr·wd) − lr·m̂/(√v̂ + ε)`.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(params: &ParamSet, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn update(&mut self, params: &mut ParamSet, grads: &ParamGrads, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Contract("optimizer state does not match the parameter set".into()));
        }
        self.step += 1;
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
            weight_decay,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let shrink = 1.0 - lr * weight_decay;
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            if !params.get(id).requires_grad {
                continue;
            }
            let i = id.index();
            let grad = grads.get(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            let theta = params.value_mut(id).data_mut();
            for k in 0..theta.len() {
                let g = grad.map_or(0.0, |g| g.data()[k]);
                m[k] = beta1 * m[k] + (1.0 - beta1) * g;
                v[k] = beta2 * v[k] + (1.0 - beta2) * g * g;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                theta[k] = theta[k] * shrink - lr * mhat / (vhat.sqrt() + epsilon);
            }
        }
        Ok(())
    }
}
