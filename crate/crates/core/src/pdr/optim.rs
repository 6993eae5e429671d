use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { alpha: 0.01, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..1.0;
        if !(self.alpha > 0.0) || !unit.contains(&self.beta1) || !unit.contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!("invalid Adam constants {self:?}")));
        }
        Ok(())
    }
}

/// Optimiser state of one attack. Momentum-SGD keeps its velocity in `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct PdrState {
    pub x_adv: Tensor,
    pub lambda: f64,
    pub m: Tensor,
    pub v: Tensor,
    pub k: u32,
}

impl PdrState {
    pub fn new(x_adv: Tensor, lambda: f64) -> Self {
        let zeros = Tensor::zeros(x_adv.shape());
        Self { m: zeros.clone(), v: zeros, x_adv, lambda, k: 0 }
    }
}

fn check(state: &PdrState, g: &Tensor, op: &'static str) -> Result<()> {
    if g.shape() != state.x_adv.shape() {
        return Err(Error::shape(op, format!("gradient {:?} vs iterate {:?}", g.shape(), state.x_adv.shape())));
    }
    Ok(())
}

/// One bias-corrected Adam step descending along `g`.
pub fn adam_step(state: &mut PdrState, g: &Tensor, c: &AdamConfig) -> Result<()> {
    check(state, g, "adam_step")?;
    state.k += 1;
    let bc1 = 1.0 - c.beta1.powi(state.k as i32);
    let bc2 = 1.0 - c.beta2.powi(state.k as i32);
    let (x, m, v) = (state.x_adv.data_mut(), state.m.data_mut(), state.v.data_mut());
    for (((xi, mi), vi), &gi) in x.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
        *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
        *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
        *xi -= c.alpha * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
    }
    Ok(())
}

/// `v <- momentum v + g; x <- x - lr v`.
pub fn momentum_sgd_step(state: &mut PdrState, g: &Tensor, lr: f64, momentum: f64) -> Result<()> {
    check(state, g, "momentum_sgd_step")?;
    state.k += 1;
    for ((xi, vi), &gi) in state.x_adv.data_mut().iter_mut().zip(state.m.data_mut()).zip(g.data()) {
        *vi = momentum * *vi + gi;
        *xi -= lr * *vi;
    }
    Ok(())
}

/// `max(0, lambda - lr (L_PD - T))`.
pub fn lambda_update(lambda: f64, l_pd: f64, threshold: f64, lr: f64) -> f64 {
    (lambda - lr * (l_pd - threshold)).max(0.0)
}
