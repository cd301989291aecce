//! Adam with serializable state. The server owns one state per parameter
//! group (model parameters, global variational parameters); each silo owns
//! one for its local variational parameters.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "adam lr must be positive, got {}",
                self.lr
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if b <= 0.0 || b >= 1.0 || b.is_nan() {
                return Err(Error::InvalidArgument(format!(
                    "adam {name} must lie in (0,1), got {b}"
                )));
            }
        }
        if self.eps <= 0.0 || self.eps.is_nan() {
            return Err(Error::InvalidArgument(format!(
                "adam eps must be positive, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Whether a step maximizes or minimizes the objective whose gradient is
/// supplied. ELBO training ascends.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Ascend,
    Descend,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub config: AdamConfig,
}

impl AdamState {
    pub fn new(dim: usize, config: AdamConfig) -> Self {
        AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
            config,
        }
    }

    pub fn dim(&self) -> usize {
        self.m.len()
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// One Adam update with bias correction, in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], direction: Direction) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::DimMismatch {
                context: "AdamState::step params",
                expected: self.m.len(),
                got: params.len(),
            });
        }
        if grad.len() != self.m.len() {
            return Err(Error::DimMismatch {
                context: "AdamState::step grad",
                expected: self.m.len(),
                got: grad.len(),
            });
        }
        self.t += 1;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = match direction {
                Direction::Ascend => -grad[i],
                Direction::Descend => grad[i],
            };
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}
