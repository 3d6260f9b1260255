//! Adam over the trainable parameter groups.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment buffers for the trainable parameters, in declaration order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub config: AdamConfig,
    pub lr: f64,
    pub step: u64,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &ParamStore<T>) -> Self {
        let ids = params.trainable_ids();
        let zeros = || {
            ids.iter()
                .map(|&id| Tensor::zeros(params.value(id).shape().to_vec()))
                .collect::<Vec<_>>()
        };
        Self {
            config,
            lr: config.lr,
            step: 0,
            m: zeros(),
            v: zeros(),
            ids,
        }
    }

    /// One update; `grads[i]` belongs to `self.ids[i]`. Parameters outside
    /// `ids` are never touched.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if grads.len() != self.ids.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} gradients for {} parameters", grads.len(), self.ids.len()),
            ));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != self.m[i].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("gradient {:?} for parameter {:?}", g.shape(), self.m[i].shape()),
                ));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let p = params.value_mut(self.ids[i]).data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for j in 0..p.len() {
                let gj = g.data()[j].as_f64();
                let mj = beta1 * m[j].as_f64() + (1.0 - beta1) * gj;
                let vj = beta2 * v[j].as_f64() + (1.0 - beta2) * gj * gj;
                m[j] = T::of(mj);
                v[j] = T::of(vj);
                let update = self.lr * (mj / c1) / ((vj / c2).sqrt() + eps);
                p[j] = T::of(p[j].as_f64() - update);
            }
        }
        Ok(())
    }
}
