use super::param::Parameter;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 coefficient added to the gradient before the moment updates.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One bias-corrected Adam update using the gradient currently stored in `param`.
pub fn adam_step(param: &mut Parameter, cfg: &AdamConfig) -> Result<()> {
    if !param.grad.is_finite() {
        return Err(Error::NonFinite(format!("gradient of `{}`", param.name())));
    }
    param.step += 1;
    let t = param.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let Parameter { value, grad, m, v, .. } = param;
    let value = value.data_mut();
    let m = m.data_mut();
    let v = v.data_mut();
    for (i, &g0) in grad.data().iter().enumerate() {
        let g = g0 + cfg.weight_decay * value[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        value[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
    }
    Ok(())
}
