//! Shared test oracles. Everything here is deliberately independent of the
//! per-silo estimator path: the monolithic gradient is assembled from the
//! variational-family primitives directly, and the conjugate ELBO is a
//! closed-form expression in the joint Gaussian moments.

#![allow(dead_code)]

use fedvar::linalg::LowerUnitriangular;
use fedvar::models::{ConjugateGaussianModel, Dataset, Model, Row, SiloShard, Unit};
use fedvar::rng::RngKey;
use fedvar::vfamily::{GlobalVarParams, LocalVarParams};

pub const LN_2PI: f64 = 1.8378770664093453;

pub fn assert_close(a: f64, b: f64, tol: f64, what: &str) {
    assert!((a - b).abs() <= tol, "{what}: {a} vs {b} (tol {tol})");
}

/// Relative agreement with an absolute floor for near-zero values.
pub fn assert_close_rel(a: f64, b: f64, rtol: f64, what: &str) {
    let scale = a.abs().max(b.abs());
    assert!(
        (a - b).abs() <= rtol * scale || (a.abs() < 1e-9 && b.abs() < 1e-9),
        "{what}: {a} vs {b} (rtol {rtol})"
    );
}

pub fn assert_vec_close_rel(a: &[f64], b: &[f64], rtol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        assert_close_rel(*x, *y, rtol, &format!("{what}[{i}]"));
    }
}

pub fn assert_vec_close_abs(a: &[f64], b: &[f64], atol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b.iter()).enumerate() {
        assert!(
            (x - y).abs() <= atol,
            "{what}[{i}]: {x} vs {y} (atol {atol})"
        );
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0_f64, f64::max)
}

pub fn conjugate_dataset(ys: &[f64], silos: usize) -> Dataset {
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

/// Structured variational parameters equal to the exact conjugate
/// posterior.
pub fn conjugate_exact_q(
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

/// Randomized variational state for a dataset, with full within-silo
/// coupling so the oracle exercises every parameter block.
pub fn random_state(
    model: &dyn Model,
    dataset: &Dataset,
    key: &RngKey,
) -> (Vec<f64>, GlobalVarParams, Vec<LocalVarParams>) {
    let n_g = model.n_global();
    let theta: Vec<f64> = key
        .derive(0)
        .std_normal(model.n_theta())
        .iter()
        .map(|x| 0.3 * x)
        .collect();
    let mut q_g = fedvar::federation::build_global_params(model);
    let draws = key.derive(1).std_normal(q_g.eta_len());
    for i in 0..n_g {
        q_g.mu[i] = 0.5 * draws[i];
        q_g.log_sigma[i] = 0.3 * draws[n_g + i] - 0.8;
    }
    {
        let strict = q_g.l.strict_lower_mut();
        for (i, s) in strict.iter_mut().enumerate() {
            *s = 0.3 * draws[2 * n_g + i];
        }
    }
    // Re-apply structural zeros.
    let mut flat_grad = vec![1.0; q_g.eta_len()];
    q_g.mask_grad(&mut flat_grad);
    {
        let n = n_g;
        for i in 1..n {
            for j in 0..i {
                let idx = 2 * n + LowerUnitriangular::strict_index(i, j);
                if flat_grad[idx] == 0.0 {
                    q_g.l.set_strict(i, j, 0.0);
                }
            }
        }
    }

    let q_ls = dataset
        .shards
        .iter()
        .map(|shard| {
            let mut q_l = fedvar::federation::build_local_params(model, shard).unwrap();
            let m = q_l.dim();
            let silo_key = key.derive(2).derive(shard.silo_id as u64);
            let draws = silo_key.std_normal(q_l.eta_len().max(1));
            for i in 0..m {
                q_l.mu_bar[i] = 0.5 * draws[i];
                q_l.log_sigma[i] = 0.3 * draws[m + i] - 0.8;
            }
            let tri = fedvar::linalg::tri_len(m);
            {
                let strict = q_l.l.strict_lower_mut();
                for (i, s) in strict.iter_mut().enumerate() {
                    *s = 0.3 * draws[2 * m + i];
                }
            }
            if q_l.train_c {
                for col in 0..q_l.global_dim() {
                    for rowi in 0..m {
                        q_l.c
                            .set(rowi, col, 0.4 * draws[2 * m + tri + col * m + rowi]);
                    }
                }
            }
            // Zero out masked coordinates to honor the block structure.
            let mut g = vec![1.0; q_l.eta_len()];
            q_l.mask_grad(&mut g);
            for i in 1..m {
                for j in 0..i {
                    let idx = 2 * m + LowerUnitriangular::strict_index(i, j);
                    if g[idx] == 0.0 {
                        q_l.l.set_strict(i, j, 0.0);
                    }
                }
            }
            q_l
        })
        .collect();
    (theta, q_g, q_ls)
}

/// The full gradient assembled without federation. For per-unit models the
/// silo blocks pool into one shard and one local factor; for per-silo
/// models the objective is differentiated jointly with the global cotangent
/// accumulated across silos before the single pullback.
pub struct MonolithicGrads {
    pub eta_g: Vec<f64>,
    pub eta_l: Vec<Vec<f64>>,
    pub theta: Vec<f64>,
}

pub fn monolithic_grads(
    model: &dyn Model,
    dataset: &Dataset,
    theta: &[f64],
    q_g: &GlobalVarParams,
    q_ls: &[LocalVarParams],
    eps_g: &[f64],
    eps_ls: &[Vec<f64>],
) -> MonolithicGrads {
    let per_unit = dataset
        .shards
        .first()
        .map(|s| {
            matches!(
                model.local_layout(s),
                fedvar::models::LocalLayout::PerUnit { .. }
            )
        })
        .unwrap_or(false);
    if per_unit {
        monolithic_grads_pooled(model, dataset, theta, q_g, q_ls, eps_g, eps_ls)
    } else {
        monolithic_grads_joint(model, dataset, theta, q_g, q_ls, eps_g, eps_ls)
    }
}

fn pool_local_params(q_ls: &[LocalVarParams]) -> (LocalVarParams, Vec<(usize, usize)>) {
    let n_g = q_ls[0].global_dim();
    let total: usize = q_ls.iter().map(|q| q.dim()).sum();
    let mut pooled = LocalVarParams::new(total, n_g);
    let mut blocks = Vec::new();
    let mut offsets = Vec::new();
    let mut offset = 0;
    for q in q_ls {
        let m = q.dim();
        offsets.push((offset, m));
        for i in 0..m {
            pooled.mu_bar[offset + i] = q.mu_bar[i];
            pooled.log_sigma[offset + i] = q.log_sigma[i];
            for col in 0..n_g {
                pooled.c.set(offset + i, col, q.c.get(i, col));
            }
            for j in 0..i {
                pooled.l.set_strict(offset + i, offset + j, q.l.get(i, j));
            }
        }
        match &q.blocks {
            Some(b) => blocks.extend(b.iter().copied()),
            None => blocks.push(m),
        }
        offset += m;
    }
    pooled = pooled.with_blocks(blocks).unwrap();
    pooled.train_c = q_ls[0].train_c;
    (pooled, offsets)
}

/// Map a pooled flat local gradient back to one silo's flat layout.
fn slice_pooled_local(
    pooled: &LocalVarParams,
    grads: &[f64],
    silo_q: &LocalVarParams,
    offset: usize,
) -> Vec<f64> {
    let big_m = pooled.dim();
    let n_g = pooled.global_dim();
    let big_tri = fedvar::linalg::tri_len(big_m);
    let m = silo_q.dim();
    let tri = fedvar::linalg::tri_len(m);
    let mut out = vec![0.0; silo_q.eta_len()];
    for i in 0..m {
        out[i] = grads[offset + i];
        out[m + i] = grads[big_m + offset + i];
        for j in 0..i {
            out[2 * m + LowerUnitriangular::strict_index(i, j)] =
                grads[2 * big_m + LowerUnitriangular::strict_index(offset + i, offset + j)];
        }
        for col in 0..n_g {
            out[2 * m + tri + col * m + i] = grads[2 * big_m + big_tri + col * big_m + offset + i];
        }
    }
    out
}

fn monolithic_grads_pooled(
    model: &dyn Model,
    dataset: &Dataset,
    theta: &[f64],
    q_g: &GlobalVarParams,
    q_ls: &[LocalVarParams],
    eps_g: &[f64],
    eps_ls: &[Vec<f64>],
) -> MonolithicGrads {
    // All units in one shard, concatenation order, so layouts line up.
    let pooled_shard = SiloShard {
        silo_id: 0,
        units: dataset
            .shards
            .iter()
            .flat_map(|s| s.units.iter().cloned())
            .collect(),
    };
    let (pooled_q, offsets) = pool_local_params(q_ls);
    let pooled_eps: Vec<f64> = eps_ls.iter().flat_map(|e| e.iter().copied()).collect();

    let z_g = q_g.sample(eps_g).unwrap();
    let z_l = pooled_q.sample(&q_g.mu, &z_g, &pooled_eps).unwrap();

    let prior = model.grad_prior_global(theta, &z_g);
    let q_g_score = q_g.grad_log_density_z(&z_g).unwrap();
    let m_grads = model.grad_local_joint(&pooled_shard, theta, &z_g, &z_l);
    let (ql_zg, ql_zl) = pooled_q.grad_log_density_z(&q_g.mu, &z_g, &z_l).unwrap();

    let cot_g: Vec<f64> = (0..q_g.dim())
        .map(|i| prior.wrt_z_g[i] - q_g_score[i] + m_grads.wrt_z_g[i] - ql_zg[i])
        .collect();
    let cot_l: Vec<f64> = (0..pooled_q.dim())
        .map(|i| m_grads.wrt_z_l[i] - ql_zl[i])
        .collect();

    let mut eta_g = q_g.vjp_eta(eps_g, &cot_g).unwrap();
    let (eta_l_pooled, through_local) = pooled_q.vjp_eta(q_g, eps_g, &pooled_eps, &cot_l).unwrap();
    for (t, c) in eta_g.iter_mut().zip(through_local.iter()) {
        *t += c;
    }

    let eta_l = q_ls
        .iter()
        .zip(offsets.iter())
        .map(|(q, &(offset, _))| slice_pooled_local(&pooled_q, &eta_l_pooled, q, offset))
        .collect();

    let mut theta_grad = prior.wrt_theta;
    for (t, g) in theta_grad.iter_mut().zip(m_grads.wrt_theta.iter()) {
        *t += g;
    }

    MonolithicGrads {
        eta_g,
        eta_l,
        theta: theta_grad,
    }
}

fn monolithic_grads_joint(
    model: &dyn Model,
    dataset: &Dataset,
    theta: &[f64],
    q_g: &GlobalVarParams,
    q_ls: &[LocalVarParams],
    eps_g: &[f64],
    eps_ls: &[Vec<f64>],
) -> MonolithicGrads {
    let z_g = q_g.sample(eps_g).unwrap();
    let prior = model.grad_prior_global(theta, &z_g);
    let q_g_score = q_g.grad_log_density_z(&z_g).unwrap();
    let mut cot_g: Vec<f64> = (0..q_g.dim())
        .map(|i| prior.wrt_z_g[i] - q_g_score[i])
        .collect();
    let mut theta_grad = prior.wrt_theta.clone();

    let mut eta_l = Vec::with_capacity(dataset.n_silos());
    let mut local_pullbacks = Vec::with_capacity(dataset.n_silos());
    for (j, shard) in dataset.shards.iter().enumerate() {
        let q_l = &q_ls[j];
        let z_l = q_l.sample(&q_g.mu, &z_g, &eps_ls[j]).unwrap();
        let m_grads = model.grad_local_joint(shard, theta, &z_g, &z_l);
        let (ql_zg, ql_zl) = q_l.grad_log_density_z(&q_g.mu, &z_g, &z_l).unwrap();
        for i in 0..q_g.dim() {
            cot_g[i] += m_grads.wrt_z_g[i] - ql_zg[i];
        }
        let cot_l: Vec<f64> = (0..q_l.dim())
            .map(|i| m_grads.wrt_z_l[i] - ql_zl[i])
            .collect();
        let (own, through) = q_l.vjp_eta(q_g, eps_g, &eps_ls[j], &cot_l).unwrap();
        eta_l.push(own);
        local_pullbacks.push(through);
        for (t, g) in theta_grad.iter_mut().zip(m_grads.wrt_theta.iter()) {
            *t += g;
        }
    }

    let mut eta_g = q_g.vjp_eta(eps_g, &cot_g).unwrap();
    for pullback in &local_pullbacks {
        for (t, c) in eta_g.iter_mut().zip(pullback.iter()) {
            *t += c;
        }
    }

    MonolithicGrads {
        eta_g,
        eta_l,
        theta: theta_grad,
    }
}

/// Closed-form ELBO of the conjugate model under the structured Gaussian
/// family, from the joint first and second moments.
pub fn analytic_conjugate_elbo(
    model: &ConjugateGaussianModel,
    dataset: &Dataset,
    q_g: &GlobalVarParams,
    q_ls: &[LocalVarParams],
) -> f64 {
    let mu_g = q_g.mu[0];
    let v_g = q_g.variances()[0];
    let tau2 = model.tau * model.tau;
    let lam2 = model.lambda * model.lambda;
    let s2 = model.s * model.s;

    let mut e_log_p =
        -0.5 * (2.0 * std::f64::consts::PI * tau2).ln() - (v_g + mu_g * mu_g) / (2.0 * tau2);
    let mut entropy = 0.5 * (LN_2PI + 1.0) + q_g.log_sigma[0];

    for (j, shard) in dataset.shards.iter().enumerate() {
        let q_l = &q_ls[j];
        let cond_cov = q_l.cond_cov();
        for (k, unit) in shard.units.iter().enumerate() {
            let y = unit.rows[0].label;
            let c_k = q_l.c.get(k, 0);
            let mean_l = q_l.mu_bar[k];
            let cross = v_g * c_k;
            let var_l = c_k * c_k * v_g + cond_cov.get(k, k);
            let var_diff = var_l + v_g - 2.0 * cross;
            e_log_p += -0.5 * (2.0 * std::f64::consts::PI * lam2).ln()
                - (var_diff + (mean_l - mu_g) * (mean_l - mu_g)) / (2.0 * lam2);
            e_log_p += -0.5 * (2.0 * std::f64::consts::PI * s2).ln()
                - (var_l + (y - mean_l) * (y - mean_l)) / (2.0 * s2);
        }
        entropy += 0.5 * (LN_2PI + 1.0) * q_l.dim() as f64;
        for s in &q_l.log_sigma {
            entropy += s;
        }
    }
    e_log_p + entropy
}

/// Joint flat layout `[eta_g | eta_l1 | eta_l2 | ...]` helpers for
/// finite differences over the whole parameter vector.
pub fn flatten_state(q_g: &GlobalVarParams, q_ls: &[LocalVarParams]) -> Vec<f64> {
    let mut flat = q_g.to_flat();
    for q in q_ls {
        flat.extend(q.to_flat());
    }
    flat
}

pub fn unflatten_state(
    template_g: &GlobalVarParams,
    template_ls: &[LocalVarParams],
    flat: &[f64],
) -> (GlobalVarParams, Vec<LocalVarParams>) {
    let mut offset = template_g.eta_len();
    let q_g = template_g.from_flat_like(&flat[..offset]).unwrap();
    let q_ls = template_ls
        .iter()
        .map(|t| {
            let len = t.eta_len();
            let q = t.from_flat_like(&flat[offset..offset + len]).unwrap();
            offset += len;
            q
        })
        .collect();
    (q_g, q_ls)
}

/// Mask for frozen coordinates in the joint flat layout.
pub fn joint_mask(q_g: &GlobalVarParams, q_ls: &[LocalVarParams]) -> Vec<f64> {
    let mut mask = vec![1.0; q_g.eta_len()];
    q_g.mask_grad(&mut mask);
    for q in q_ls {
        let mut m = vec![1.0; q.eta_len()];
        q.mask_grad(&mut m);
        mask.extend(m);
    }
    mask
}
