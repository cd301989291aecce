//! Bayesian logistic mixed model with a random intercept per subject.
//!
//! ```text
//! y_it | beta, b_i ~ Bern(logit^{-1}(beta0 + beta1 smoke_i + beta2 age_it
//!                                   + beta3 smoke_i * age_it + b_i))
//! beta_k ~ N(0, 10^2)      k = 0..3
//! omega  ~ N(0, 10^2)
//! b_i | omega ~ N(0, exp(-2 omega))
//! ```
//!
//! Globals are `(beta0..beta3, omega)`; each subject's intercept `b_i` is a
//! local latent. A subject and all of its visits form one data unit, so the
//! intercept travels with its rows under any partitioning.

use super::{LocalJointGrads, LocalLayout, Model, PriorGrads, SiloShard, VariationalStructure};
use crate::{Error, Result};

const PRIOR_VAR: f64 = 100.0;
const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug, Default)]
pub struct LogisticMixedModel;

impl LogisticMixedModel {
    pub fn new() -> Self {
        LogisticMixedModel
    }

    /// Rows carry `[smoke, age_centered]` features and a 0/1 label.
    pub fn validate_shard(shard: &SiloShard) -> Result<()> {
        for unit in &shard.units {
            for row in &unit.rows {
                if row.features.len() != 2 {
                    return Err(Error::InvalidArgument(format!(
                        "mixed-model rows need [smoke, age] features, got {}",
                        row.features.len()
                    )));
                }
                if row.label != 0.0 && row.label != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "binary label expected, got {}",
                        row.label
                    )));
                }
                if row.features[0] != 0.0 && row.features[0] != 1.0 {
                    return Err(Error::InvalidArgument(format!(
                        "smoke indicator must be 0 or 1, got {}",
                        row.features[0]
                    )));
                }
            }
        }
        Ok(())
    }
}

#[inline]
fn sigmoid(a: f64) -> f64 {
    if a >= 0.0 {
        1.0 / (1.0 + (-a).exp())
    } else {
        let e = a.exp();
        e / (1.0 + e)
    }
}

/// log Bern(y | sigmoid(a)), stable for large |a|.
#[inline]
fn log_bernoulli(y: f64, a: f64) -> f64 {
    // y*a - log(1 + exp(a)) = y*a - softplus(a)
    let softplus = if a > 0.0 {
        a + (-a).exp().ln_1p()
    } else {
        a.exp().ln_1p()
    };
    y * a - softplus
}

impl Model for LogisticMixedModel {
    fn id(&self) -> &'static str {
        "glmm"
    }

    fn n_theta(&self) -> usize {
        0
    }

    fn n_global(&self) -> usize {
        5
    }

    fn local_layout(&self, _shard: &SiloShard) -> LocalLayout {
        LocalLayout::PerUnit { unit_dim: 1 }
    }

    fn log_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> f64 {
        let mut lp = 0.0;
        for &v in z_g.iter().take(5) {
            lp += -0.5 * LN_2PI - 0.5 * PRIOR_VAR.ln() - v * v / (2.0 * PRIOR_VAR);
        }
        lp
    }

    fn grad_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> PriorGrads {
        PriorGrads {
            wrt_theta: vec![],
            wrt_z_g: z_g.iter().map(|v| -v / PRIOR_VAR).collect(),
        }
    }

    fn log_local_joint(&self, shard: &SiloShard, _theta: &[f64], z_g: &[f64], z_l: &[f64]) -> f64 {
        let (beta, omega) = (&z_g[..4], z_g[4]);
        // b_i | omega ~ N(0, exp(-2 omega)): log density is
        // -0.5 ln(2 pi) + omega - 0.5 b^2 exp(2 omega).
        let e2w = (2.0 * omega).exp();
        let mut total = 0.0;
        for (i, unit) in shard.units.iter().enumerate() {
            let b = z_l[i];
            total += -0.5 * LN_2PI + omega - 0.5 * b * b * e2w;
            for row in &unit.rows {
                let smoke = row.features[0];
                let age = row.features[1];
                let a = beta[0] + beta[1] * smoke + beta[2] * age + beta[3] * smoke * age + b;
                total += log_bernoulli(row.label, a);
            }
        }
        total
    }

    fn grad_local_joint(
        &self,
        shard: &SiloShard,
        _theta: &[f64],
        z_g: &[f64],
        z_l: &[f64],
    ) -> LocalJointGrads {
        let (beta, omega) = (&z_g[..4], z_g[4]);
        let e2w = (2.0 * omega).exp();
        let mut g_beta = [0.0; 4];
        let mut g_omega = 0.0;
        let mut g_b = Vec::with_capacity(z_l.len());
        for (i, unit) in shard.units.iter().enumerate() {
            let b = z_l[i];
            g_omega += 1.0 - b * b * e2w;
            let mut gb = -b * e2w;
            for row in &unit.rows {
                let smoke = row.features[0];
                let age = row.features[1];
                let a = beta[0] + beta[1] * smoke + beta[2] * age + beta[3] * smoke * age + b;
                let resid = row.label - sigmoid(a);
                g_beta[0] += resid;
                g_beta[1] += resid * smoke;
                g_beta[2] += resid * age;
                g_beta[3] += resid * smoke * age;
                gb += resid;
            }
            g_b.push(gb);
        }
        let mut wrt_z_g = g_beta.to_vec();
        wrt_z_g.push(g_omega);
        LocalJointGrads {
            wrt_theta: vec![],
            wrt_z_g,
            wrt_z_l: g_b,
        }
    }

    fn variational_structure(&self) -> VariationalStructure {
        // Intercepts are conditionally independent given the globals, so
        // the local factor is diagonal while C stays full.
        VariationalStructure {
            diagonal_global: false,
            unit_blocks: true,
            train_c: true,
        }
    }
}
