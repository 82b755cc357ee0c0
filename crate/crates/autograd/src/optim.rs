use std::collections::BTreeMap;

use crate::float::Float;
use crate::params::{GradMap, ParamStore};

/// Adam with decoupled weight decay. Decay applies to parameters of rank 2
/// and above; biases and normalization scales are left undecayed.
#[derive(Clone, Debug)]
pub struct AdamW<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, Vec<F>>,
    v: BTreeMap<String, Vec<F>>,
}

impl<F: Float> AdamW<F> {
    pub fn new(beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        Self { beta1, beta2, eps: 1e-8, weight_decay, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &GradMap<F>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (one_b1, one_b2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let step_size = F::lit(lr / bc1);
        let inv_bc2 = F::lit(1.0 / bc2);
        let eps = F::lit(self.eps);
        for (name, g) in grads {
            let p = store.get_mut(name);
            let decay = if p.shape().len() >= 2 { F::lit(1.0 - lr * self.weight_decay) } else { F::one() };
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![F::zero(); n]);
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + one_b1 * gi;
                *vi = b2 * *vi + one_b2 * gi * gi;
                *pi = *pi * decay - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }

    /// Clears moment estimates for one parameter (used after re-initializing it).
    pub fn reset_state(&mut self, name: &str) {
        self.m.remove(name);
        self.v.remove(name);
    }
}
