//! Model interface and concrete models.
//!
//! A model exposes the global-prior and per-silo joint log-densities of a
//! hierarchical generative process, together with analytic gradients with
//! respect to every argument. The per-silo term for silo `j` depends only on
//! silo `j`'s data, which is what makes the additive gradient exchange work.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

mod conjugate;
mod glmm;
mod hierbnn;
pub mod io;
mod multinom;
mod synth;

pub use conjugate::{ConjugateGaussianModel, ExactConjugatePosterior};
pub use glmm::LogisticMixedModel;
pub use hierbnn::ToyHierBnnModel;
pub use multinom::MultinomRegModel;
pub use synth::{gen_conjugate_units, gen_glmm_units, gen_heterogeneous_classification};

/// One data row: a feature vector and a label (integer labels are stored as
/// floats and validated on load).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Row {
    pub features: Vec<f64>,
    pub label: f64,
}

/// The latent-bearing unit of data. One unit owns one block of local latent
/// variables: a single observation for the conjugate and classification
/// models, a subject with all its visits for the mixed model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Unit {
    /// Position in the global observation order, stable across
    /// partitionings. Noise for this unit's local latents is keyed by this
    /// index, never by silo membership.
    pub global_index: u64,
    pub rows: Vec<Row>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloShard {
    pub silo_id: usize,
    pub units: Vec<Unit>,
}

impl SiloShard {
    pub fn n_units(&self) -> usize {
        self.units.len()
    }

    pub fn n_rows(&self) -> usize {
        self.units.iter().map(|u| u.rows.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub shards: Vec<SiloShard>,
}

impl Dataset {
    /// All units in one silo.
    pub fn single_silo(units: Vec<Unit>) -> Self {
        Dataset {
            shards: vec![SiloShard { silo_id: 0, units }],
        }
    }

    /// Contiguous split of the units into `j_silos` shards, sized as evenly
    /// as possible.
    pub fn partition_contiguous(units: Vec<Unit>, j_silos: usize) -> Result<Self> {
        if j_silos == 0 {
            return Err(Error::InvalidArgument("silo count must be >= 1".into()));
        }
        if units.len() < j_silos {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} units across {} silos",
                units.len(),
                j_silos
            )));
        }
        let n = units.len();
        let base = n / j_silos;
        let extra = n % j_silos;
        let mut shards = Vec::with_capacity(j_silos);
        let mut it = units.into_iter();
        for j in 0..j_silos {
            let take = base + usize::from(j < extra);
            shards.push(SiloShard {
                silo_id: j,
                units: it.by_ref().take(take).collect(),
            });
        }
        Ok(Dataset { shards })
    }

    pub fn n_silos(&self) -> usize {
        self.shards.len()
    }

    /// Total unit count N.
    pub fn total_units(&self) -> usize {
        self.shards.iter().map(|s| s.units.len()).sum()
    }

    /// Unit count N_j.
    pub fn units_in(&self, silo: usize) -> usize {
        self.shards[silo].units.len()
    }

    /// All units pooled into a single silo, preserving global order.
    pub fn pooled(&self) -> Dataset {
        let mut units: Vec<Unit> = self
            .shards
            .iter()
            .flat_map(|s| s.units.iter().cloned())
            .collect();
        units.sort_by_key(|u| u.global_index);
        Dataset::single_silo(units)
    }

    /// Checks shard ids are 0..J-1 in order, global indices form a
    /// permutation of 0..N-1, and every row is finite.
    pub fn validate(&self) -> Result<()> {
        for (j, shard) in self.shards.iter().enumerate() {
            if shard.silo_id != j {
                return Err(Error::InvalidArgument(format!(
                    "shard at position {j} has silo_id {}",
                    shard.silo_id
                )));
            }
        }
        let n = self.total_units();
        let mut seen = vec![false; n];
        for shard in &self.shards {
            for unit in &shard.units {
                let idx = unit.global_index as usize;
                if idx >= n || seen[idx] {
                    return Err(Error::InvalidArgument(format!(
                        "global indices must form a permutation of 0..{n}; offending index {idx}"
                    )));
                }
                seen[idx] = true;
                for row in &unit.rows {
                    if !row.label.is_finite() || !row.features.iter().all(|x| x.is_finite()) {
                        return Err(Error::InvalidArgument(format!(
                            "non-finite data in unit {idx}"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// How a silo's local latent vector decomposes, which drives both the
/// variational block structure and the noise keying.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalLayout {
    /// One latent block of `unit_dim` per data unit; noise is keyed by the
    /// unit's global index, so any partitioning draws the same values.
    PerUnit { unit_dim: usize },
    /// A single latent block owned by the silo itself (possibly empty);
    /// noise is keyed by silo id.
    PerSilo { dim: usize },
}

impl LocalLayout {
    pub fn local_dim(&self, shard: &SiloShard) -> usize {
        match self {
            LocalLayout::PerUnit { unit_dim } => unit_dim * shard.units.len(),
            LocalLayout::PerSilo { dim } => *dim,
        }
    }
}

/// Variational structure a model prescribes for itself.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VariationalStructure {
    /// Freeze the global factor to a diagonal covariance.
    pub diagonal_global: bool,
    /// Freeze each silo's factor to independent per-unit blocks
    /// (conditional independence given the globals).
    pub unit_blocks: bool,
    /// Train the local-on-global conditioning matrix.
    pub train_c: bool,
}

impl Default for VariationalStructure {
    fn default() -> Self {
        VariationalStructure {
            diagonal_global: false,
            unit_blocks: true,
            train_c: true,
        }
    }
}

/// Gradients of the global prior term.
#[derive(Clone, Debug)]
pub struct PriorGrads {
    pub wrt_theta: Vec<f64>,
    pub wrt_z_g: Vec<f64>,
}

/// Gradients of a silo's joint term.
#[derive(Clone, Debug)]
pub struct LocalJointGrads {
    pub wrt_theta: Vec<f64>,
    pub wrt_z_g: Vec<f64>,
    pub wrt_z_l: Vec<f64>,
}

/// A hierarchical probabilistic model with analytic gradients.
pub trait Model {
    /// Identifier used in configs, checkpoints, and the CLI.
    fn id(&self) -> &'static str;

    fn n_theta(&self) -> usize;
    fn n_global(&self) -> usize;
    fn local_layout(&self, shard: &SiloShard) -> LocalLayout;

    fn n_local(&self, shard: &SiloShard) -> usize {
        self.local_layout(shard).local_dim(shard)
    }

    /// `log p_theta(z_g)`.
    fn log_prior_global(&self, theta: &[f64], z_g: &[f64]) -> f64;

    fn grad_prior_global(&self, theta: &[f64], z_g: &[f64]) -> PriorGrads;

    /// `log p_theta(y_j, z_l | z_g)` for one silo's shard.
    fn log_local_joint(&self, shard: &SiloShard, theta: &[f64], z_g: &[f64], z_l: &[f64]) -> f64;

    fn grad_local_joint(
        &self,
        shard: &SiloShard,
        theta: &[f64],
        z_g: &[f64],
        z_l: &[f64],
    ) -> LocalJointGrads;

    /// Structure the variational approximation should use for this model.
    fn variational_structure(&self) -> VariationalStructure {
        VariationalStructure::default()
    }

    /// Class probabilities for one feature vector, for classification
    /// models. `None` when prediction is not defined for the model.
    fn predict_proba(
        &self,
        _theta: &[f64],
        _z_g: &[f64],
        _z_l: &[f64],
        _features: &[f64],
    ) -> Option<Vec<f64>> {
        None
    }
}

pub(crate) fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    const LN_2PI: f64 = 1.8378770664093453;
    -0.5 * LN_2PI - 0.5 * var.ln() - (x - mean) * (x - mean) / (2.0 * var)
}

/// Numerically stable log(sum(exp(a))).
pub(crate) fn log_sum_exp(a: &[f64]) -> f64 {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let mut s = 0.0;
    for &x in a {
        s += (x - m).exp();
    }
    m + s.ln()
}
