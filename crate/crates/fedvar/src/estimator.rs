//! Single-sample ELBO estimation and its per-silo gradient decomposition.
//!
//! For one joint draw the objective splits into a server term and one term
//! per silo:
//!
//! ```text
//! L0 = log p_theta(z_g)        - log q(z_g)
//! Lj = log p_theta(y_j, z_l | z_g) - log q(z_l | z_g)
//! ```
//!
//! Gradients flow through the sampling path only (density parameters are
//! constants), so silo `j` can hand the server its additive contribution to
//! the global-parameter gradient without revealing its local draw, its local
//! variational parameters, or its data. Every function here is pure; round
//! ordering and state live in the federation layer.

use serde::{Deserialize, Serialize};

use crate::linalg::all_finite;
use crate::models::{Dataset, Model, SiloShard};
use crate::vfamily::{GlobalVarParams, LocalVarParams};
use crate::{Error, Result};

/// What one silo sends back per round. The payload is the whole privacy
/// boundary: aggregated gradients and a scalar objective term, nothing
/// derived from the local draw or local parameters beyond them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloGradReport {
    pub silo_id: usize,
    pub g_theta: Vec<f64>,
    pub g_eta_g: Vec<f64>,
    pub elbo_term: f64,
}

/// Single-sample objective estimate with its decomposition.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboEstimate {
    pub value: f64,
    pub server_term: f64,
    pub silo_terms: Vec<f64>,
}

fn ensure_finite(value: f64, context: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite { context })
    }
}

fn ensure_finite_vec(v: Vec<f64>, context: &'static str) -> Result<Vec<f64>> {
    if all_finite(&v) {
        Ok(v)
    } else {
        Err(Error::NonFinite { context })
    }
}

/// `L0` at a materialized global draw.
pub fn server_elbo_term(
    model: &dyn Model,
    theta: &[f64],
    q_g: &GlobalVarParams,
    z_g: &[f64],
) -> Result<f64> {
    let value = model.log_prior_global(theta, z_g) - q_g.log_density(z_g)?;
    ensure_finite(value, "server ELBO term")
}

/// `Lj` at a materialized joint draw.
pub fn silo_elbo_term(
    model: &dyn Model,
    shard: &SiloShard,
    theta: &[f64],
    q_l: &LocalVarParams,
    mu_g: &[f64],
    z_g: &[f64],
    z_l: &[f64],
) -> Result<f64> {
    let value = model.log_local_joint(shard, theta, z_g, z_l) - q_l.log_density(mu_g, z_g, z_l)?;
    ensure_finite(value, "silo ELBO term")
}

/// Full decomposition for one noise draw: the server term plus one term per
/// silo, in silo order. `value` is the left-to-right sum.
pub fn elbo_terms(
    model: &dyn Model,
    dataset: &Dataset,
    theta: &[f64],
    q_g: &GlobalVarParams,
    q_ls: &[LocalVarParams],
    eps_g: &[f64],
    eps_ls: &[Vec<f64>],
) -> Result<ElboEstimate> {
    if q_ls.len() != dataset.n_silos() || eps_ls.len() != dataset.n_silos() {
        return Err(Error::DimMismatch {
            context: "elbo_terms silo count",
            expected: dataset.n_silos(),
            got: q_ls.len().min(eps_ls.len()),
        });
    }
    let z_g = q_g.sample(eps_g)?;
    let server_term = server_elbo_term(model, theta, q_g, &z_g)?;
    let mut silo_terms = Vec::with_capacity(dataset.n_silos());
    let mut value = server_term;
    for (j, shard) in dataset.shards.iter().enumerate() {
        let z_l = q_ls[j].sample(&q_g.mu, &z_g, &eps_ls[j])?;
        let term = silo_elbo_term(model, shard, theta, &q_ls[j], &q_g.mu, &z_g, &z_l)?;
        silo_terms.push(term);
        value += term;
    }
    Ok(ElboEstimate {
        value,
        server_term,
        silo_terms,
    })
}

/// Mean of `samples` independent single-draw objective estimates, for
/// diagnostics. Training always steps on a single draw; this only smooths
/// the reported curve. Sample `s` draws its noise under `key.derive(s)`
/// with the usual per-unit keying, so the value is partition-invariant.
#[allow(clippy::too_many_arguments)]
pub fn elbo_mc_mean(
    model: &dyn Model,
    dataset: &Dataset,
    theta: &[f64],
    q_g: &GlobalVarParams,
    q_ls: &[LocalVarParams],
    key: &crate::rng::RngKey,
    round: u64,
    samples: u64,
) -> Result<f64> {
    if samples == 0 {
        return Err(Error::InvalidArgument(
            "need at least one objective sample".into(),
        ));
    }
    let mut total = 0.0;
    for s in 0..samples {
        let (eps_g, eps_ls) =
            crate::federation::draw_round_noise(&key.derive(s), round, model, dataset);
        total += elbo_terms(model, dataset, theta, q_g, q_ls, &eps_g, &eps_ls)?.value;
    }
    Ok(total / samples as f64)
}

/// Cotangent `d Lj / d z_l`, optionally with the model term rescaled (the
/// communication-efficient algorithm multiplies the joint term by N/N_j
/// during local phases).
#[allow(clippy::too_many_arguments)]
fn local_cotangents(
    model: &dyn Model,
    shard: &SiloShard,
    theta: &[f64],
    q_l: &LocalVarParams,
    mu_g: &[f64],
    z_g: &[f64],
    z_l: &[f64],
    model_scale: f64,
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let model_grads = model.grad_local_joint(shard, theta, z_g, z_l);
    let (q_zg, q_zl) = q_l.grad_log_density_z(mu_g, z_g, z_l)?;
    let wrt_zg: Vec<f64> = model_grads
        .wrt_z_g
        .iter()
        .zip(q_zg.iter())
        .map(|(m, q)| model_scale * m - q)
        .collect();
    let wrt_zl: Vec<f64> = model_grads
        .wrt_z_l
        .iter()
        .zip(q_zl.iter())
        .map(|(m, q)| model_scale * m - q)
        .collect();
    let theta_part: Vec<f64> = model_grads
        .wrt_theta
        .iter()
        .map(|g| model_scale * g)
        .collect();
    Ok((wrt_zg, wrt_zl, theta_part))
}

/// Gradient of `Lj` for the silo's own variational parameters, flat layout.
pub fn silo_local_grad(
    model: &dyn Model,
    shard: &SiloShard,
    theta: &[f64],
    q_l: &LocalVarParams,
    q_g: &GlobalVarParams,
    eps_g: &[f64],
    eps_l: &[f64],
) -> Result<Vec<f64>> {
    let z_g = q_g.sample(eps_g)?;
    let z_l = q_l.sample(&q_g.mu, &z_g, eps_l)?;
    silo_local_grad_at(model, shard, theta, q_l, q_g, eps_g, eps_l, &z_g, &z_l, 1.0)
}

/// Same gradient at an explicit draw. The round logic needs this split: the
/// draw is taken once, the local parameters step, and later pieces reuse the
/// original draw against the updated parameters. `model_scale` multiplies
/// the model term of the objective (the local-phase N/N_j factor).
#[allow(clippy::too_many_arguments)]
pub fn silo_local_grad_at(
    model: &dyn Model,
    shard: &SiloShard,
    theta: &[f64],
    q_l: &LocalVarParams,
    q_g: &GlobalVarParams,
    eps_g: &[f64],
    eps_l: &[f64],
    z_g: &[f64],
    z_l: &[f64],
    model_scale: f64,
) -> Result<Vec<f64>> {
    let (_, wrt_zl, _) =
        local_cotangents(model, shard, theta, q_l, &q_g.mu, z_g, z_l, model_scale)?;
    let (grad_local, _) = q_l.vjp_eta(q_g, eps_g, eps_l, &wrt_zl)?;
    ensure_finite_vec(grad_local, "silo local gradient")
}

/// Silo `j`'s additive contribution to the global-parameter gradient: the
/// pullback of `d Lj / d z_g` through the global sampling map plus the
/// pullback of `d Lj / d z_l` through the z_g-dependence of the local map.
pub fn silo_global_grad_contrib(
    model: &dyn Model,
    shard: &SiloShard,
    theta: &[f64],
    q_g: &GlobalVarParams,
    q_l: &LocalVarParams,
    eps_g: &[f64],
    eps_l: &[f64],
) -> Result<Vec<f64>> {
    let z_g = q_g.sample(eps_g)?;
    let z_l = q_l.sample(&q_g.mu, &z_g, eps_l)?;
    silo_global_grad_contrib_at(model, shard, theta, q_g, q_l, eps_g, eps_l, &z_g, &z_l, 1.0)
}

#[allow(clippy::too_many_arguments)]
pub fn silo_global_grad_contrib_at(
    model: &dyn Model,
    shard: &SiloShard,
    theta: &[f64],
    q_g: &GlobalVarParams,
    q_l: &LocalVarParams,
    eps_g: &[f64],
    eps_l: &[f64],
    z_g: &[f64],
    z_l: &[f64],
    model_scale: f64,
) -> Result<Vec<f64>> {
    let (wrt_zg, wrt_zl, _) =
        local_cotangents(model, shard, theta, q_l, &q_g.mu, z_g, z_l, model_scale)?;
    let mut total = q_g.vjp_eta(eps_g, &wrt_zg)?;
    let (_, through_local) = q_l.vjp_eta(q_g, eps_g, eps_l, &wrt_zl)?;
    for (t, c) in total.iter_mut().zip(through_local.iter()) {
        *t += c;
    }
    ensure_finite_vec(total, "silo global-gradient contribution")
}

/// `d Lj / d theta` at a materialized draw; empty for models without
/// trainable parameters.
pub fn silo_theta_grad(
    model: &dyn Model,
    shard: &SiloShard,
    theta: &[f64],
    z_g: &[f64],
    z_l: &[f64],
) -> Result<Vec<f64>> {
    let grads = model.grad_local_joint(shard, theta, z_g, z_l);
    ensure_finite_vec(grads.wrt_theta, "silo theta gradient")
}

/// Pullback of `d L0 / d z_g` through the global sampling map; the server's
/// own additive term.
pub fn server_prior_entropy_grad(
    model: &dyn Model,
    theta: &[f64],
    q_g: &GlobalVarParams,
    eps_g: &[f64],
) -> Result<Vec<f64>> {
    let z_g = q_g.sample(eps_g)?;
    let prior = model.grad_prior_global(theta, &z_g);
    let q_grad = q_g.grad_log_density_z(&z_g)?;
    let cotangent: Vec<f64> = prior
        .wrt_z_g
        .iter()
        .zip(q_grad.iter())
        .map(|(p, q)| p - q)
        .collect();
    let grad = q_g.vjp_eta(eps_g, &cotangent)?;
    ensure_finite_vec(grad, "server prior/entropy gradient")
}

/// Assemble the full global-parameter gradient from the server term and all
/// silo reports. Reports must cover silo ids `0..J-1` exactly once; the fold
/// runs in ascending silo order regardless of arrival order.
pub fn server_global_grad(server_term: &[f64], reports: &[SiloGradReport]) -> Result<Vec<f64>> {
    let j = reports.len();
    let mut by_silo: Vec<Option<&SiloGradReport>> = vec![None; j];
    for report in reports {
        if report.silo_id >= j {
            return Err(Error::Protocol(format!(
                "report from silo {} but only {} reports supplied",
                report.silo_id, j
            )));
        }
        if by_silo[report.silo_id].is_some() {
            return Err(Error::Protocol(format!(
                "duplicate report from silo {}",
                report.silo_id
            )));
        }
        by_silo[report.silo_id] = Some(report);
    }
    let mut total = server_term.to_vec();
    for slot in by_silo {
        let report = slot.expect("every slot filled after duplicate check");
        if report.g_eta_g.len() != total.len() {
            return Err(Error::DimMismatch {
                context: "server_global_grad report length",
                expected: total.len(),
                got: report.g_eta_g.len(),
            });
        }
        for (t, g) in total.iter_mut().zip(report.g_eta_g.iter()) {
            *t += g;
        }
    }
    ensure_finite_vec(total, "assembled global gradient")
}

/// Assemble the full theta gradient: the prior's theta part plus every
/// silo's contribution, in ascending silo order.
pub fn server_theta_grad(
    model: &dyn Model,
    theta: &[f64],
    z_g: &[f64],
    reports: &[SiloGradReport],
) -> Result<Vec<f64>> {
    let j = reports.len();
    let mut by_silo: Vec<Option<&SiloGradReport>> = vec![None; j];
    for report in reports {
        if report.silo_id >= j || by_silo[report.silo_id].is_some() {
            return Err(Error::Protocol(format!(
                "bad or duplicate silo id {} in theta reduction",
                report.silo_id
            )));
        }
        by_silo[report.silo_id] = Some(report);
    }
    let mut total = model.grad_prior_global(theta, z_g).wrt_theta;
    for slot in by_silo {
        let report = slot.expect("every slot filled");
        if report.g_theta.len() != total.len() {
            return Err(Error::DimMismatch {
                context: "server_theta_grad report length",
                expected: total.len(),
                got: report.g_theta.len(),
            });
        }
        for (t, g) in total.iter_mut().zip(report.g_theta.iter()) {
            *t += g;
        }
    }
    ensure_finite_vec(total, "assembled theta gradient")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ConjugateGaussianModel, Row, Unit};
    use crate::rng::RngKey;

    fn toy_dataset(ys: &[f64], silos: usize) -> Dataset {
        let units: Vec<Unit> = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| Unit {
                global_index: i as u64,
                rows: vec![Row {
                    features: vec![],
                    label: y,
                }],
            })
            .collect();
        Dataset::partition_contiguous(units, silos).unwrap()
    }

    /// Structured parameters matching the exact conjugate posterior.
    fn exact_q(
        model: &ConjugateGaussianModel,
        dataset: &Dataset,
    ) -> (GlobalVarParams, Vec<LocalVarParams>) {
        let post = model.exact_posterior(dataset);
        let mut q_g = GlobalVarParams::new(1);
        q_g.mu = vec![post.mean_g];
        q_g.log_sigma = vec![0.5 * post.var_g.ln()];
        let q_ls = dataset
            .shards
            .iter()
            .map(|shard| {
                let m = shard.units.len();
                let mut q_l = LocalVarParams::new(m, 1).with_blocks(vec![1; m]).unwrap();
                for (i, unit) in shard.units.iter().enumerate() {
                    q_l.mu_bar[i] = post.coeff_y * unit.rows[0].label + post.coeff_zg * post.mean_g;
                    q_l.c.set(i, 0, post.coeff_zg);
                    q_l.log_sigma[i] = 0.5 * post.cond_var.ln();
                }
                q_l
            })
            .collect();
        (q_g, q_ls)
    }

    #[test]
    fn elbo_equals_log_evidence_at_exact_posterior() {
        let model = ConjugateGaussianModel::new(1.1, 0.8, 1.3).unwrap();
        let ds = toy_dataset(&[0.4, -0.9, 1.3, 0.2, 0.9, -0.3], 2);
        let (q_g, q_ls) = exact_q(&model, &ds);
        let log_ev = model.log_evidence(&ds);
        for seed in 0..20 {
            let key = RngKey::new(seed);
            let eps_g = key.derive(0).std_normal(1);
            let eps_ls: Vec<Vec<f64>> = ds
                .shards
                .iter()
                .map(|s| key.derive(1 + s.silo_id as u64).std_normal(s.units.len()))
                .collect();
            let est = elbo_terms(&model, &ds, &[], &q_g, &q_ls, &eps_g, &eps_ls).unwrap();
            assert!(
                (est.value - log_ev).abs() < 1e-10,
                "seed {seed}: {} vs {log_ev}",
                est.value
            );
        }
    }

    #[test]
    fn elbo_decomposition_is_partition_additive() {
        let model = ConjugateGaussianModel::new(1.0, 1.0, 1.0).unwrap();
        let ys = [0.4, -0.9, 1.3, 0.2];
        let ds1 = toy_dataset(&ys, 1);
        let ds2 = toy_dataset(&ys, 2);
        // Same per-unit variational state in both partitionings.
        let (q_g, _) = exact_q(&model, &ds1);
        let make_q = |ds: &Dataset| -> Vec<LocalVarParams> {
            ds.shards
                .iter()
                .map(|s| {
                    let m = s.units.len();
                    LocalVarParams::new(m, 1).with_blocks(vec![1; m]).unwrap()
                })
                .collect()
        };
        // Per-observation noise keyed by global index.
        let key = RngKey::new(3);
        let eps_g = key.derive(0).std_normal(1);
        let noise = |ds: &Dataset| -> Vec<Vec<f64>> {
            ds.shards
                .iter()
                .map(|s| {
                    s.units
                        .iter()
                        .map(|u| key.derive(1).derive(u.global_index).std_normal(1)[0])
                        .collect()
                })
                .collect()
        };
        let e1 = elbo_terms(&model, &ds1, &[], &q_g, &make_q(&ds1), &eps_g, &noise(&ds1)).unwrap();
        let e2 = elbo_terms(&model, &ds2, &[], &q_g, &make_q(&ds2), &eps_g, &noise(&ds2)).unwrap();
        assert!((e1.value - e2.value).abs() < 1e-10);
        assert_eq!(e1.server_term, e2.server_term);
    }

    #[test]
    fn local_grad_vanishes_at_exact_conditional() {
        let model = ConjugateGaussianModel::new(1.0, 0.7, 1.1).unwrap();
        let ds = toy_dataset(&[0.2, -0.4, 0.8], 1);
        let (q_g, q_ls) = exact_q(&model, &ds);
        for seed in 0..50 {
            let key = RngKey::new(100 + seed);
            let eps_g = key.derive(0).std_normal(1);
            let eps_l = key.derive(1).std_normal(3);
            let grad = silo_local_grad(&model, &ds.shards[0], &[], &q_ls[0], &q_g, &eps_g, &eps_l)
                .unwrap();
            let norm = crate::linalg::norm2(&grad);
            assert!(norm < 1e-8, "seed {seed}: local grad norm {norm}");
        }
    }

    #[test]
    fn assembled_global_grad_vanishes_at_exact_posterior() {
        let model = ConjugateGaussianModel::new(1.0, 0.7, 1.1).unwrap();
        let ds = toy_dataset(&[0.2, -0.4, 0.8, 1.5], 2);
        let (q_g, q_ls) = exact_q(&model, &ds);
        for seed in 0..50 {
            let key = RngKey::new(200 + seed);
            let eps_g = key.derive(0).std_normal(1);
            let server = server_prior_entropy_grad(&model, &[], &q_g, &eps_g).unwrap();
            let mut reports = Vec::new();
            for (j, shard) in ds.shards.iter().enumerate() {
                let eps_l = key.derive(1 + j as u64).std_normal(shard.units.len());
                let g =
                    silo_global_grad_contrib(&model, shard, &[], &q_g, &q_ls[j], &eps_g, &eps_l)
                        .unwrap();
                reports.push(SiloGradReport {
                    silo_id: j,
                    g_theta: vec![],
                    g_eta_g: g,
                    elbo_term: 0.0,
                });
            }
            let total = server_global_grad(&server, &reports).unwrap();
            let norm = crate::linalg::norm2(&total);
            assert!(norm < 1e-8, "seed {seed}: assembled grad norm {norm}");
        }
    }

    /// Locals and data that never look at the global block.
    struct DecoupledModel;

    impl Model for DecoupledModel {
        fn id(&self) -> &'static str {
            "decoupled-test"
        }
        fn n_theta(&self) -> usize {
            0
        }
        fn n_global(&self) -> usize {
            2
        }
        fn local_layout(&self, _shard: &SiloShard) -> crate::models::LocalLayout {
            crate::models::LocalLayout::PerUnit { unit_dim: 1 }
        }
        fn log_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> f64 {
            z_g.iter().map(|z| -0.5 * z * z).sum()
        }
        fn grad_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> crate::models::PriorGrads {
            crate::models::PriorGrads {
                wrt_theta: vec![],
                wrt_z_g: z_g.iter().map(|z| -z).collect(),
            }
        }
        fn log_local_joint(
            &self,
            shard: &SiloShard,
            _theta: &[f64],
            _z_g: &[f64],
            z_l: &[f64],
        ) -> f64 {
            shard
                .units
                .iter()
                .zip(z_l.iter())
                .map(|(u, z)| -0.5 * z * z - 0.5 * (u.rows[0].label - z) * (u.rows[0].label - z))
                .sum()
        }
        fn grad_local_joint(
            &self,
            shard: &SiloShard,
            _theta: &[f64],
            _z_g: &[f64],
            z_l: &[f64],
        ) -> crate::models::LocalJointGrads {
            crate::models::LocalJointGrads {
                wrt_theta: vec![],
                wrt_z_g: vec![0.0, 0.0],
                wrt_z_l: shard
                    .units
                    .iter()
                    .zip(z_l.iter())
                    .map(|(u, z)| -z + (u.rows[0].label - z))
                    .collect(),
            }
        }
    }

    #[test]
    fn decoupled_silo_contributes_nothing_to_global_grad() {
        let model = DecoupledModel;
        let ds = toy_dataset(&[0.7, -0.2, 1.1], 1);
        let q_g = GlobalVarParams::new(2);
        let mut q_l = LocalVarParams::new(3, 2)
            .with_blocks(vec![1, 1, 1])
            .unwrap();
        q_l.c = crate::linalg::Mat::zeros(3, 2);
        let key = RngKey::new(9);
        let eps_g = key.derive(0).std_normal(2);
        let eps_l = key.derive(1).std_normal(3);
        let g = silo_global_grad_contrib(&model, &ds.shards[0], &[], &q_g, &q_l, &eps_g, &eps_l)
            .unwrap();
        assert!(g.iter().all(|&x| x == 0.0), "{g:?}");
        // The silo still learns: its own gradient is nonzero.
        let local =
            silo_local_grad(&model, &ds.shards[0], &[], &q_l, &q_g, &eps_g, &eps_l).unwrap();
        assert!(crate::linalg::norm2(&local) > 1e-3);
    }

    #[test]
    fn theta_grad_empty_for_parameter_free_model() {
        let model = ConjugateGaussianModel::new(1.0, 1.0, 1.0).unwrap();
        let ds = toy_dataset(&[0.5], 1);
        let g = silo_theta_grad(&model, &ds.shards[0], &[], &[0.1], &[0.2]).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn report_reduction_rejects_duplicates_and_gaps() {
        let server = vec![0.0; 2];
        let make = |id: usize| SiloGradReport {
            silo_id: id,
            g_theta: vec![],
            g_eta_g: vec![1.0, 2.0],
            elbo_term: 0.0,
        };
        assert!(server_global_grad(&server, &[make(0), make(0)]).is_err());
        assert!(server_global_grad(&server, &[make(0), make(2)]).is_err());
        let ok = server_global_grad(&server, &[make(1), make(0)]).unwrap();
        assert_eq!(ok, vec![2.0, 4.0]);
    }

    #[test]
    fn report_reduction_is_order_invariant() {
        let server = vec![0.5, -0.5];
        let a = SiloGradReport {
            silo_id: 0,
            g_theta: vec![],
            g_eta_g: vec![0.125, 2.0],
            elbo_term: 0.0,
        };
        let b = SiloGradReport {
            silo_id: 1,
            g_theta: vec![],
            g_eta_g: vec![-1.0, 0.25],
            elbo_term: 0.0,
        };
        let x = server_global_grad(&server, &[a.clone(), b.clone()]).unwrap();
        let y = server_global_grad(&server, &[b, a]).unwrap();
        assert_eq!(x, y);
    }
}
