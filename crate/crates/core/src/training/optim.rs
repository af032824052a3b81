use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Param, ParamKey, Real};

/// Adam with decoupled weight decay. Moments are kept per parameter identity.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    moments: HashMap<ParamKey, (Vec<T>, Vec<T>)>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that received a gradient.
    ///
    /// A non-finite gradient aborts the update before any parameter changes.
    pub fn step(&mut self, params: Vec<&mut Param<T>>, grads: &Gradients<T>) -> Result<()> {
        for p in &params {
            if let Some(g) = grads.param_slice(p.key()) {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Numeric("non-finite gradient".into()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - self.beta1), T::lit(1.0 - self.beta2));
        let step_size = T::lit(self.lr / bc1);
        let sqrt_bc2 = T::lit(bc2.sqrt());
        let eps = T::lit(self.eps);
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        for p in params {
            let Some(g) = grads.param_slice(p.key()) else { continue };
            let n = g.len();
            let (m, v) = self
                .moments
                .entry(p.key())
                .or_insert_with(|| (vec![T::zero(); n], vec![T::zero(); n]));
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                m[i] = b1 * m[i] + one_b1 * g[i];
                v[i] = b2 * v[i] + one_b2 * g[i] * g[i];
                *w = *w * decay;
                *w = *w - step_size * m[i] / (v[i].sqrt() / sqrt_bc2 + eps);
            }
        }
        Ok(())
    }

    /// Weight decay alone, for parameters with zero gradient. Used in tests of
    /// the decoupled decay term.
    pub fn decay_only(&self, params: Vec<&mut Param<T>>) {
        let decay = T::lit(1.0 - self.lr * self.weight_decay);
        for p in params {
            for w in p.value.data_mut() {
                *w = *w * decay;
            }
        }
    }
}
