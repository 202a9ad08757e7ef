//! Adam optimizer with bias correction.
//!
//! State (first/second moments) lives in the optimizer and is keyed by
//! parameter position, so the caller must pass the same parameter list in the
//! same order on every step. Moments are stored at the parameter precision.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("adam lr must be finite and >= 0, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("adam {name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::Config(format!("adam eps must be finite and > 0, got {}", self.eps)));
        }
        Ok(())
    }
}

pub struct Adam<S = f32> {
    hp: AdamParams,
    t: u64,
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(hp: AdamParams) -> Result<Self> {
        hp.validate()?;
        Ok(Adam { hp, t: 0, m: Vec::new(), v: Vec::new() })
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update over the full parameter list. `params` and `grads` must
    /// line up one-to-one; moment buffers are allocated on the first call and
    /// shape-checked afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &[&Tensor<S>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} params vs {} grads", params.len(), grads.len()),
            ));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape().to_vec())).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(Error::shape(
                "adam_step",
                format!("optimizer tracks {} params, got {}", self.m.len(), params.len()),
            ));
        }
        self.t += 1;
        let b1 = S::from_f64(self.hp.beta1);
        let b2 = S::from_f64(self.hp.beta2);
        let one = S::one();
        let lr = S::from_f64(self.hp.lr);
        let eps = S::from_f64(self.hp.eps);
        let bc1 = S::from_f64(1.0 - self.hp.beta1.powi(self.t as i32));
        let bc2 = S::from_f64(1.0 - self.hp.beta2.powi(self.t as i32));

        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {idx}: shape {:?} vs grad {:?}", p.shape(), g.shape()),
                ));
            }
            if p.shape() != self.m[idx].shape() {
                return Err(Error::shape(
                    "adam_step",
                    format!("param {idx}: shape {:?} vs moment {:?}", p.shape(), self.m[idx].shape()),
                ));
            }
            let pm = p.data_mut();
            let ms = self.m[idx].data_mut();
            let vs = self.v[idx].data_mut();
            for (i, &gv) in g.data().iter().enumerate() {
                ms[i] = b1 * ms[i] + (one - b1) * gv;
                vs[i] = b2 * vs[i] + (one - b2) * gv * gv;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                pm[i] = pm[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
