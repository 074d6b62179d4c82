//! Adam with decoupled weight decay.

use alloc::vec::Vec;

use crate::matrix::Matrix;
use crate::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 5e-4,
            weight_decay: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment accumulators for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
    /// Updates applied so far; each parameter counts its own steps because a
    /// routed expert only receives gradient when some token selects it.
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub moments: Vec<Moments>,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let moments = store
            .iter()
            .map(|(_, p)| Moments {
                m: Matrix::zeros(p.rows(), p.cols()),
                v: Matrix::zeros(p.rows(), p.cols()),
                step: 0,
            })
            .collect();
        AdamState { moments }
    }
}

/// One update. Parameters whose gradient is `None` did not take part in the
/// pass and are left entirely untouched, moments and decay included.
pub fn adam_step(store: &mut ParamStore, grads: &[Option<Matrix>], state: &mut AdamState, cfg: &AdamConfig) {
    debug_assert_eq!(grads.len(), store.len());
    for ((param, grad), mom) in store.values_mut().zip(grads).zip(&mut state.moments) {
        let Some(grad) = grad else { continue };
        debug_assert_eq!(grad.shape(), param.shape());
        mom.step += 1;
        let t = mom.step as f64;
        let bc1 = 1.0 - libm::pow(cfg.beta1, t);
        let bc2 = 1.0 - libm::pow(cfg.beta2, t);
        let decay = 1.0 - cfg.lr * cfg.weight_decay;
        let (m, v) = (mom.m.as_mut_slice(), mom.v.as_mut_slice());
        for (i, (w, &g)) in param.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            *w *= decay;
            *w -= cfg.lr * m_hat / (libm::sqrt(v_hat) + cfg.eps);
        }
    }
}
