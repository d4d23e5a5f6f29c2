//! AdamW with decoupled weight decay, oriented for gradient ascent.

use serde::{Deserialize, Serialize};

use super::PolicyParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl OptState {
    pub fn new(n: usize) -> Self {
        OptState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// `theta += lr * m_hat / (sqrt(v_hat) + eps) - lr * weight_decay * theta`.
pub fn adamw_step(
    params: &mut PolicyParams,
    grad: &[f64],
    opt: &mut OptState,
    cfg: &AdamWConfig,
) -> Result<()> {
    let n = params.theta.len();
    if grad.len() != n || opt.m.len() != n || opt.v.len() != n {
        return Err(Error::InvalidInput(format!(
            "shape mismatch: theta {n}, grad {}, m {}, v {}",
            grad.len(),
            opt.m.len(),
            opt.v.len()
        )));
    }
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient entry {i}")));
    }
    opt.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(opt.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(opt.t as i32);
    for (((theta, &g), m), v) in params
        .theta
        .iter_mut()
        .zip(grad)
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
    {
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *theta += cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * *theta;
    }
    Ok(())
}
