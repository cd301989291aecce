//! Monte Carlo posterior-predictive probabilities from a checkpoint.

use crate::federation::{labels, Checkpoint};
use crate::models::{Dataset, Model};
use crate::rng::RngKey;
use crate::{Error, Result};

/// Average class probabilities over `n_samples` draws from the variational
/// approximation, one probability vector per observation in shard/unit/row
/// order. Test shards are matched to checkpoint silos by id, so each
/// silo's observations are scored under its own personalized local block.
pub fn posterior_predict(
    model: &dyn Model,
    checkpoint: &Checkpoint,
    test: &Dataset,
    n_samples: usize,
) -> Result<Vec<Vec<f64>>> {
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be >= 1".into()));
    }
    if checkpoint.model_id != model.id() {
        return Err(Error::InvalidArgument(format!(
            "checkpoint was trained with model {:?}, predicting with {:?}",
            checkpoint.model_id,
            model.id()
        )));
    }
    if checkpoint.eta_g.dim() != model.n_global() {
        return Err(Error::DimMismatch {
            context: "posterior_predict global dimension",
            expected: model.n_global(),
            got: checkpoint.eta_g.dim(),
        });
    }
    // Silo id -> local parameters.
    let lookup = |silo_id: usize| {
        checkpoint
            .silos
            .iter()
            .find(|s| s.silo_id == silo_id)
            .ok_or_else(|| {
                Error::InvalidArgument(format!("checkpoint has no silo {silo_id} for test shard"))
            })
    };

    let q_g = &checkpoint.eta_g;
    let n_obs: usize = test.shards.iter().map(|s| s.n_rows()).sum();
    let mut sums: Vec<Vec<f64>> = Vec::with_capacity(n_obs);
    let pred_root = RngKey::new(checkpoint.seed).derive(labels::PREDICT);

    for sample in 0..n_samples as u64 {
        let sample_key = pred_root.derive(sample);
        let eps_g = sample_key.derive(labels::GLOBAL).std_normal(q_g.dim());
        let z_g = q_g.sample(&eps_g)?;
        let mut obs_index = 0;
        for shard in &test.shards {
            let silo = lookup(shard.silo_id)?;
            let eps_l = sample_key
                .derive(labels::LOCAL_SILO)
                .derive(shard.silo_id as u64)
                .std_normal(silo.eta_l.dim());
            let z_l = silo.eta_l.sample(&q_g.mu, &z_g, &eps_l)?;
            for unit in &shard.units {
                for row in &unit.rows {
                    let probs = model
                        .predict_proba(&checkpoint.theta, &z_g, &z_l, &row.features)
                        .ok_or_else(|| {
                            Error::InvalidArgument(format!(
                                "model {:?} does not define predictions",
                                model.id()
                            ))
                        })?;
                    if sums.len() <= obs_index {
                        sums.push(vec![0.0; probs.len()]);
                    }
                    for (acc, p) in sums[obs_index].iter_mut().zip(probs.iter()) {
                        *acc += p;
                    }
                    obs_index += 1;
                }
            }
        }
    }

    let inv = 1.0 / n_samples as f64;
    for row in sums.iter_mut() {
        for p in row.iter_mut() {
            *p *= inv;
        }
    }
    Ok(sums)
}
