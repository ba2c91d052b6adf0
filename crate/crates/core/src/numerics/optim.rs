use serde::{Deserialize, Serialize};

use super::tape::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// One bias-corrected Adam update of `ids`; `step` counts from 1.
pub fn adam_step(store: &mut ParamStore, ids: &[ParamId], cfg: &AdamConfig, step: u32) {
    assert!(step >= 1, "adam step counter starts at 1");
    let c1 = 1.0 - cfg.beta1.powi(step as i32);
    let c2 = 1.0 - cfg.beta2.powi(step as i32);
    for &id in ids {
        let p = store.get_mut(id);
        let n = p.value.len();
        for i in 0..n {
            let g = p.grad.data()[i];
            let m = cfg.beta1 * p.moment1.data()[i] + (1.0 - cfg.beta1) * g;
            let v = cfg.beta2 * p.moment2.data()[i] + (1.0 - cfg.beta2) * g * g;
            p.moment1.data_mut()[i] = m;
            p.moment2.data_mut()[i] = v;
            let m_hat = m / c1;
            let v_hat = v / c2;
            p.value.data_mut()[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}
