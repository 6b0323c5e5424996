//! AdamW with decoupled weight decay.

use crate::model::ParamStore;
use crate::numerics::{ParamId, Tensor};

/// Optimizer state: first and second moments per parameter, kept in `f64`.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(params: &ParamStore, beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        let zeros = || {
            params
                .entries()
                .iter()
                .map(|e| vec![0.0; e.tensor.len()])
                .collect()
        };
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update at learning rate `lr`. Trainable parameters missing from
    /// `grads` are treated as having a zero gradient.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let mut grad_of: Vec<Option<&Tensor>> = vec![None; params.len()];
        for (id, g) in grads {
            grad_of[id.0] = Some(g);
        }
        for id in params.ids().collect::<Vec<_>>() {
            let entry = params.entry(id);
            if !entry.trainable {
                continue;
            }
            let wd = if entry.decay { self.weight_decay } else { 0.0 };
            let g = grad_of[id.0];
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let p = params.get_mut(id).data_mut();
            for k in 0..p.len() {
                let gk = g.map_or(0.0, |g| f64::from(g.data()[k]));
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                let old = f64::from(p[k]);
                p[k] = (old - lr * wd * old - lr * m_hat / (v_hat.sqrt() + self.eps)) as f32;
            }
        }
    }
}
