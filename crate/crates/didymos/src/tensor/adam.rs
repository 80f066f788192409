//! Adam optimizer with bias correction.

use super::{Param, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update over a set of parameters. `step` is 1-based.
///
/// The whole step aborts before mutating anything if any gradient is
/// non-finite; the error names the offending parameter index.
pub fn adam_step<E: Scalar>(params: &mut [Param<E>], cfg: &AdamConfig, step: u64) -> Result<()> {
    if step == 0 {
        return Err(Error::invalid_input("adam_step", "step index must be >= 1"));
    }
    for (idx, p) in params.iter().enumerate() {
        for (i, &g) in p.grad.data().iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::non_finite(
                    "adam_step",
                    format!("gradient of parameter {idx} element {i} = {g}"),
                ));
            }
        }
    }

    let b1 = E::from_f64(cfg.beta1);
    let b2 = E::from_f64(cfg.beta2);
    let one_m_b1 = E::from_f64(1.0 - cfg.beta1);
    let one_m_b2 = E::from_f64(1.0 - cfg.beta2);
    let bias1 = E::from_f64(1.0 - cfg.beta1.powi(step as i32));
    let bias2 = E::from_f64(1.0 - cfg.beta2.powi(step as i32));
    let lr = E::from_f64(cfg.lr);
    let eps = E::from_f64(cfg.eps);

    for p in params.iter_mut() {
        let g = p.grad.data().to_vec();
        let (m, v, val) = (p.m.data_mut(), p.v.data_mut(), &mut p.value);
        for ((mi, vi), (&gi, xi)) in m
            .iter_mut()
            .zip(v.iter_mut())
            .zip(g.iter().zip(val.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + one_m_b1 * gi;
            *vi = b2 * *vi + one_m_b2 * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *xi = *xi - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
