use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Adam hyperparameters. Weight decay enters as an additive L2 gradient `λ·θ`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-5,
        }
    }
}

/// First/second moment estimates, one buffer per parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(sizes: impl IntoIterator<Item = usize>) -> Self {
        let (m, v) = sizes.into_iter().map(|n| (vec![T::zero(); n], vec![T::zero(); n])).unzip();
        Self { step: 0, m, v }
    }
}

impl Adam {
    /// One bias-corrected update of every parameter buffer in place.
    pub fn step<T: Scalar>(&self, params: &mut [&mut [T]], grads: &[&[T]], state: &mut AdamState<T>) -> Result<()> {
        if params.len() != grads.len() || params.len() != state.m.len() {
            return Err(Error::invalid(format!(
                "adam: {} parameters, {} gradients, {} state buffers",
                params.len(),
                grads.len(),
                state.m.len()
            )));
        }
        state.step += 1;
        let t = state.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (wd, eps) = (T::of(self.weight_decay), T::of(self.eps));
        let step_size = T::of(self.lr / c1);
        let c2s = T::of(c2.sqrt());
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut state.m[k], &mut state.v[k]);
            if p.len() != g.len() || p.len() != m.len() {
                return Err(Error::invalid(format!("adam: buffer {k} size mismatch")));
            }
            for j in 0..p.len() {
                let gj = g[j] + wd * p[j];
                m[j] = b1 * m[j] + (T::one() - b1) * gj;
                v[j] = b2 * v[j] + (T::one() - b2) * gj * gj;
                p[j] = p[j] - step_size * m[j] / (v[j].sqrt() / c2s + eps);
            }
        }
        Ok(())
    }
}
