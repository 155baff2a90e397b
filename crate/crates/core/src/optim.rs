//! Adam with classic (coupled) L2 weight decay.

use alloc::vec::Vec;

use crate::params::{Gradients, ParamStore};
use crate::real::Real;

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub weight_decay: T,
    step: i32,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamStore<T>, lr: f64, weight_decay: f64) -> Self {
        let zeros = || params.iter().map(|p| alloc::vec![T::zero(); p.value.len()]).collect();
        Adam {
            lr: T::lit(lr),
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
            weight_decay: T::lit(weight_decay),
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.step
    }

    /// One bias-corrected update. Weight decay is folded into the gradient
    /// (`g + λθ`) before the moment estimates.
    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &Gradients<T>) {
        self.step += 1;
        let bc1 = T::one() - self.beta1.powi(self.step);
        let bc2 = T::one() - self.beta2.powi(self.step);
        let ids: Vec<_> = params.ids().collect();
        for id in ids {
            let g = grads.get(id).data();
            let (m, v) = (&mut self.first[id.index()], &mut self.second[id.index()]);
            for (k, theta) in params.get_mut(id).data_mut().iter_mut().enumerate() {
                let gk = g[k] + self.weight_decay * *theta;
                m[k] = self.beta1 * m[k] + (T::one() - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (T::one() - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
