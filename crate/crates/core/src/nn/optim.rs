use crate::error::{Error, Result};
use crate::nn::params::ParamStore;

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl Adam {
    /// One bias-corrected Adam update over every entry, then clear gradients.
    ///
    /// Fails without touching any state if some entry has no gradient.
    pub fn step(&self, store: &mut ParamStore, lr: f32) -> Result<()> {
        if let Some(e) = store.entries().iter().find(|e| !e.grad_ready()) {
            return Err(Error::State(format!("no gradient for parameter '{}'", e.name)));
        }
        store.step += 1;
        let t = store.step as i32;
        let c1 = 1.0 - (self.beta1 as f64).powi(t);
        let c2 = 1.0 - (self.beta2 as f64).powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (c1, c2) = (c1 as f32, c2 as f32);
        for e in store.entries_mut() {
            let value = e.value.data_mut();
            let grad = e.grad.data();
            let m = e.m.data_mut();
            let v = e.v.data_mut();
            for i in 0..value.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + (1.0 - b1) * g;
                v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        store.clear_grads();
        Ok(())
    }
}

/// Adam step with the default hyperparameters.
pub fn adam_step(store: &mut ParamStore, lr: f32) -> Result<()> {
    Adam::default().step(store, lr)
}
