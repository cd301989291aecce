//! Fully Gaussian verification model with a closed-form posterior.
//!
//! One scalar global effect, one scalar local effect per observation:
//!
//! ```text
//! Z_G ~ N(0, tau^2)
//! Z_{L,k} | Z_G ~ N(Z_G, lambda^2)
//! y_k | Z_{L,k} ~ N(Z_{L,k}, s^2)
//! ```
//!
//! Marginalizing the locals gives `y_k | Z_G ~iid N(Z_G, lambda^2 + s^2)`,
//! so the posterior over `Z_G`, the per-observation conditional posteriors,
//! and the log evidence are all available exactly. Every ELBO and gradient
//! claim in the crate is checked against this model.

use super::{
    log_normal_pdf, LocalJointGrads, LocalLayout, Model, PriorGrads, SiloShard,
    VariationalStructure,
};
use crate::models::Dataset;
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct ConjugateGaussianModel {
    pub tau: f64,
    pub lambda: f64,
    pub s: f64,
}

/// Closed-form posterior quantities.
#[derive(Clone, Debug)]
pub struct ExactConjugatePosterior {
    /// Posterior mean of the global effect.
    pub mean_g: f64,
    /// Posterior variance of the global effect.
    pub var_g: f64,
    /// Conditional posterior of local k is
    /// `N(coeff_y * y_k + coeff_zg * z_g, cond_var)`.
    pub coeff_y: f64,
    pub coeff_zg: f64,
    pub cond_var: f64,
}

impl ConjugateGaussianModel {
    pub fn new(tau: f64, lambda: f64, s: f64) -> Result<Self> {
        for (name, v) in [("tau", tau), ("lambda", lambda), ("s", s)] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "conjugate scale {name} must be positive, got {v}"
                )));
            }
        }
        Ok(ConjugateGaussianModel { tau, lambda, s })
    }

    fn labels(dataset: &Dataset) -> Vec<f64> {
        let mut ys: Vec<(u64, f64)> = dataset
            .shards
            .iter()
            .flat_map(|sh| sh.units.iter().map(|u| (u.global_index, u.rows[0].label)))
            .collect();
        ys.sort_by_key(|(i, _)| *i);
        ys.into_iter().map(|(_, y)| y).collect()
    }

    /// Exact posterior of the latent variables given all observations.
    pub fn exact_posterior(&self, dataset: &Dataset) -> ExactConjugatePosterior {
        let ys = Self::labels(dataset);
        let c = self.lambda * self.lambda + self.s * self.s;
        let prec = 1.0 / (self.tau * self.tau) + ys.len() as f64 / c;
        let var_g = 1.0 / prec;
        let mean_g = var_g * ys.iter().sum::<f64>() / c;
        ExactConjugatePosterior {
            mean_g,
            var_g,
            coeff_y: self.lambda * self.lambda / c,
            coeff_zg: self.s * self.s / c,
            cond_var: self.lambda * self.lambda * self.s * self.s / c,
        }
    }

    /// Exact log marginal likelihood `log p(y)`.
    pub fn log_evidence(&self, dataset: &Dataset) -> f64 {
        const LN_2PI: f64 = 1.8378770664093453;
        let ys = Self::labels(dataset);
        let n = ys.len() as f64;
        if ys.is_empty() {
            return 0.0;
        }
        let c = self.lambda * self.lambda + self.s * self.s;
        let t2 = self.tau * self.tau;
        let sum: f64 = ys.iter().sum();
        let sum_sq: f64 = ys.iter().map(|y| y * y).sum();
        let logdet = (n - 1.0) * c.ln() + (c + n * t2).ln();
        let quad = sum_sq / c - t2 * sum * sum / (c * (c + n * t2));
        -0.5 * n * LN_2PI - 0.5 * logdet - 0.5 * quad
    }
}

impl Model for ConjugateGaussianModel {
    fn id(&self) -> &'static str {
        "conjugate"
    }

    fn n_theta(&self) -> usize {
        0
    }

    fn n_global(&self) -> usize {
        1
    }

    fn local_layout(&self, _shard: &SiloShard) -> LocalLayout {
        LocalLayout::PerUnit { unit_dim: 1 }
    }

    fn log_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> f64 {
        log_normal_pdf(z_g[0], 0.0, self.tau * self.tau)
    }

    fn grad_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> PriorGrads {
        PriorGrads {
            wrt_theta: vec![],
            wrt_z_g: vec![-z_g[0] / (self.tau * self.tau)],
        }
    }

    fn log_local_joint(&self, shard: &SiloShard, _theta: &[f64], z_g: &[f64], z_l: &[f64]) -> f64 {
        debug_assert_eq!(z_l.len(), shard.units.len());
        let g = z_g[0];
        let lam2 = self.lambda * self.lambda;
        let s2 = self.s * self.s;
        let mut total = 0.0;
        for (k, unit) in shard.units.iter().enumerate() {
            let zl = z_l[k];
            total += log_normal_pdf(zl, g, lam2);
            total += log_normal_pdf(unit.rows[0].label, zl, s2);
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
        let g = z_g[0];
        let lam2 = self.lambda * self.lambda;
        let s2 = self.s * self.s;
        let mut g_zg = 0.0;
        let mut g_zl = Vec::with_capacity(z_l.len());
        for (k, unit) in shard.units.iter().enumerate() {
            let zl = z_l[k];
            g_zg += (zl - g) / lam2;
            g_zl.push(-(zl - g) / lam2 + (unit.rows[0].label - zl) / s2);
        }
        LocalJointGrads {
            wrt_theta: vec![],
            wrt_z_g: vec![g_zg],
            wrt_z_l: g_zl,
        }
    }

    fn variational_structure(&self) -> VariationalStructure {
        VariationalStructure::default()
    }
}
