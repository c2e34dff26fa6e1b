use crate::param::{Grads, ParamStore};

/// AdamW with decoupled weight decay.
///
/// Decay is skipped for biases and normalisation gains (names ending in
/// `.bias` or `.gain`).
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.tensor.len()]).collect::<Vec<_>>();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
            decay: store
                .iter()
                .map(|(_, p)| !(p.name.ends_with(".bias") || p.name.ends_with(".gain")))
                .collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update; `lr[i]` is the learning rate of parameter `i`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: &[f64]) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let i = id.0;
            let g = &grads.values[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let rate = lr[i];
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            let data = store.tensor_mut(id).data_mut();
            for k in 0..data.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                data[k] -= rate * (mhat / (vhat.sqrt() + self.eps) + wd * data[k]);
            }
        }
    }
}

/// Linear warmup to 1.0 over `warmup_steps`, constant afterwards.
pub fn warmup_factor(step: u64, warmup_steps: u64) -> f64 {
    if warmup_steps == 0 {
        1.0
    } else {
        ((step + 1) as f64 / warmup_steps as f64).min(1.0)
    }
}
