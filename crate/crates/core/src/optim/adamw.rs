use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `θ ← θ − η·wd·θ`.
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWParams {
    pub(crate) fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| (0.0..1.0).contains(&b);
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::InvalidInput(format!(
                "adamw betas must lie in [0, 1), got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return Err(Error::InvalidInput(format!(
                "adamw eps must be positive and weight_decay nonnegative, got ({}, {})",
                self.eps, self.weight_decay
            )));
        }
        Ok(())
    }
}

/// First and second moment estimates for one block.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWState {
    pub m: Matrix,
    pub v: Matrix,
    pub t: u32,
}

impl AdamWState {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            t: 0,
        }
    }

    /// Advances the moments with `grad` and returns the updated parameters.
    pub fn step(&mut self, theta: &Matrix, grad: &Matrix, eta: f64, p: &AdamWParams) -> Matrix {
        self.t += 1;
        self.m = self.m.zip_map(grad, |m, g| p.beta1 * m + (1.0 - p.beta1) * g);
        self.v = self.v.zip_map(grad, |v, g| p.beta2 * v + (1.0 - p.beta2) * g * g);
        let c1 = 1.0 - p.beta1.powi(self.t as i32);
        let c2 = 1.0 - p.beta2.powi(self.t as i32);
        let step = self
            .m
            .zip_map(&self.v, |m, v| (m / c1) / ((v / c2).sqrt() + p.eps));
        let mut out = theta.scale(1.0 - eta * p.weight_decay);
        out.axpy(-eta, &step);
        out
    }
}
