//! Adam with decoupled weight decay over flat parameter vectors.
//!
//! Moments are kept in f64; parameters are read, updated in f64 and rounded
//! back to their f32 storage once per step. The decay is decoupled: it
//! multiplies the parameter directly instead of being folded into the
//! gradient, so zero gradients with nonzero decay still shrink the weights.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    /// Steps taken so far; bias correction uses t+1 on the next step.
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(n: usize, weight_decay: f64) -> AdamState {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One update: p ← p·(1 − lr·wd) − lr·m̂/(√v̂ + ε).
    pub fn step(&mut self, params: &mut [f32], grads: &[f32], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state holds {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i] as f64;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let p = params[i] as f64;
            params[i] = (p * (1.0 - lr * self.weight_decay) - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
        }
        Ok(())
    }
}
