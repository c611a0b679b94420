use super::ParamStore;
use crate::error::{Error, Result};

/// Step learning-rate schedule: `lr0 · 0.5^floor(epoch / period)`.
pub fn lr_at_epoch(lr0: f32, halving_period: usize, epoch: usize) -> f32 {
    let halvings = epoch / halving_period.max(1);
    lr0 * 0.5f32.powi(halvings as i32)
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamW {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamWState {
    pub step: u32,
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
}

impl AdamWState {
    pub fn for_store(store: &ParamStore) -> Self {
        Self {
            step: 0,
            m: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: store.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

impl AdamW {
    /// One update of a single tensor. `step` is the 1-based step count.
    pub fn update(&self, param: &mut [f32], grad: &[f32], m: &mut [f32], v: &mut [f32], step: u32, lr: f32) -> Result<()> {
        let n = param.len();
        if grad.len() != n || m.len() != n || v.len() != n {
            return Err(Error::Shape(format!(
                "adamw buffers disagree: param {n}, grad {}, m {}, v {}",
                grad.len(),
                m.len(),
                v.len()
            )));
        }
        let bc1 = 1.0 - self.beta1.powi(step as i32);
        let bc2 = 1.0 - self.beta2.powi(step as i32);
        let decay = 1.0 - lr * self.weight_decay;
        for i in 0..n {
            let g = grad[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            param[i] = param[i] * decay - lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }

    /// Applies one step to every tensor of `store` using its accumulated
    /// gradients (missing gradients count as zero).
    pub fn step(&self, store: &mut ParamStore, state: &mut AdamWState, lr: f32) -> Result<()> {
        if state.m.len() != store.len() {
            return Err(Error::Shape(format!(
                "optimizer state tracks {} tensors, store has {}",
                state.m.len(),
                store.len()
            )));
        }
        state.step += 1;
        let step = state.step;
        for (idx, (_, t)) in store.iter_mut().enumerate() {
            let grad = t.grad.take().unwrap_or_else(|| vec![0.0; t.numel()]);
            self.update(&mut t.data, &grad, &mut state.m[idx], &mut state.v[idx], step, lr)?;
            t.grad = Some(grad);
        }
        Ok(())
    }
}
