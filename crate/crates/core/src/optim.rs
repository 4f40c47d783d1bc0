//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nets::ParamSet;
use crate::tensor::Tensor;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.5,
            beta2: 0.999,
            eps: ADAM_EPS,
        }
    }
}

/// Moment estimates for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// Steps taken so far.
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        Self {
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    /// One update with `grads` given in parameter order.
    pub fn step(&mut self, cfg: &AdamConfig, lr: f64, params: &mut ParamSet, grads: &[Tensor]) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::Shape(format!(
                "{} gradients / {} moments for {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let c2 = 1.0 - cfg.beta2.powi(self.t as i32);
        let moments = self.m.tensors_mut().zip(self.v.tensors_mut());
        for ((p, g), (m, v)) in params.tensors_mut().zip(grads).zip(moments) {
            if g.shape() != p.shape() {
                return Err(Error::Shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let (m, v) = (m.data_mut(), v.data_mut());
            for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *p -= lr * mh / (vh.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}
