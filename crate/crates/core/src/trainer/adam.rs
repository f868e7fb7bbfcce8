use serde::{Deserialize, Serialize};

use crate::autograd::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected adaptive-moment update; `t` counts updates from 1.
pub fn adam_update<T: Real>(param: &mut [T], grad: &[T], m: &mut [T], v: &mut [T], t: u64, lr: f64, hp: &AdamParams) {
    assert!(t >= 1, "update counter starts at 1");
    assert!(param.len() == grad.len() && m.len() == grad.len() && v.len() == grad.len());
    let b1 = T::from_f64_lossy(hp.beta1);
    let b2 = T::from_f64_lossy(hp.beta2);
    let one = T::one();
    let corr1 = T::from_f64_lossy(1.0 - hp.beta1.powi(t as i32));
    let corr2 = T::from_f64_lossy(1.0 - hp.beta2.powi(t as i32));
    let lr = T::from_f64_lossy(lr);
    let eps = T::from_f64_lossy(hp.eps);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (one - b1) * g;
        v[i] = b2 * v[i] + (one - b2) * g * g;
        let m_hat = m[i] / corr1;
        let v_hat = v[i] / corr2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// `lr0 · ratio^⌊step / every⌋`.
pub fn lr_at(lr0: f64, decay_every: u64, decay_ratio: f64, step: u64) -> f64 {
    lr0 * decay_ratio.powi((step / decay_every.max(1)) as i32)
}
