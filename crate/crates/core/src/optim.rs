//! AdamW with decoupled weight decay.
//!
//! All state (parameters and both moment buffers) is rounded to `f32` after
//! every update so a checkpoint captures it exactly.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamW {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
        }
    }
}

/// Moment buffers plus the update counter used for bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: ParamStore,
    pub v: ParamStore,
    pub t: u64,
}

impl AdamState {
    pub fn zeros_like(params: &ParamStore) -> Self {
        let z = params.map_values(|m| Matrix::zeros(m.rows(), m.cols()));
        Self {
            m: z.clone(),
            v: z,
            t: 0,
        }
    }
}

impl AdamW {
    /// One update over every parameter accepted by `trainable`.
    pub fn step(
        &self,
        params: &mut ParamStore,
        state: &mut AdamState,
        grads: &ParamStore,
        lr: f64,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<()> {
        state.t += 1;
        let bc1 = 1.0 - self.beta1.powi(state.t as i32);
        let bc2 = 1.0 - self.beta2.powi(state.t as i32);
        for (name, p) in params.iter_mut() {
            if !trainable(name) {
                continue;
            }
            let g = grads.get(name)?;
            let m = state
                .m
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(format!("adam m for {name}")))?;
            let v = state
                .v
                .get_mut(name)
                .ok_or_else(|| Error::MissingParam(format!("adam v for {name}")))?;
            let decay = 1.0 - lr * self.weight_decay;
            let it = p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data());
            for (((pi, mi), vi), gi) in it {
                *mi = (self.beta1 * *mi + (1.0 - self.beta1) * gi) as f32 as f64;
                *vi = (self.beta2 * *vi + (1.0 - self.beta2) * gi * gi) as f32 as f64;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = (*pi * decay - lr * mhat / (vhat.sqrt() + self.eps)) as f32 as f64;
            }
        }
        Ok(())
    }
}
