use serde::{Deserialize, Serialize};

use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Adaptive moment estimation, no weight decay, no warmup.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.get(id).len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters absent from `grads` are treated as
    /// having zero gradient this step.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut dense: Vec<Option<&Tensor>> = vec![None; store.len()];
        for (id, g) in grads {
            dense[id.index()] = Some(g);
        }
        for id in store.ids() {
            let i = id.index();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            if let Some(g) = dense[i] {
                for ((m, v), g) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                    *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                    *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                }
            } else {
                m.iter_mut().for_each(|m| *m *= self.beta1);
                v.iter_mut().for_each(|v| *v *= self.beta2);
            }
            if m.iter().all(|&x| x == 0.0) {
                continue;
            }
            let p = store.get_mut(id);
            for ((p, m), v) in p.data_mut().iter_mut().zip(m.iter()).zip(v.iter()) {
                *p -= self.lr * (m / bc1) / ((v / bc2).sqrt() + self.eps);
            }
        }
    }
}
