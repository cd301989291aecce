//! Communication-efficient training: local multi-step phases followed by
//! server-side averaging.
//!
//! Each round the server sends `(theta, eta_g)`; every silo runs `m` local
//! optimization steps on its own data with the model term of the objective
//! rescaled by `N / N_j` (its shard as a stand-in for the full likelihood),
//! then returns its drifted copies. The server averages `theta`
//! arithmetically and averages the global Gaussian factors through their
//! Wasserstein barycenter: mean of means, and for the covariance either the
//! diagonal closed form `(mean of standard deviations)^2` or the fixed-point
//! solution of
//!
//! ```text
//! S = J^{-1} sum_j (S^{1/2} Sigma_j S^{1/2})^{1/2}
//! ```
//!
//! Averaging distributions rather than raw parameters is what makes the
//! scheme parameterization-independent.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::estimator::{self, silo_global_grad_contrib_at, silo_local_grad_at, silo_theta_grad};
use crate::federation::{
    build_global_params, build_local_params, draw_global_noise, draw_local_noise, labels,
    train_noise_root, Checkpoint, SiloCheckpoint, Snapshot, TraceRow, TrainingTrace,
    CHECKPOINT_VERSION,
};
use crate::linalg::{self, Mat};
use crate::models::{Dataset, Model, SiloShard};
use crate::optimizer::{AdamConfig, AdamState, Direction};
use crate::rng::RngKey;
use crate::vfamily::{GlobalVarParams, LocalVarParams};
use crate::{Error, Result};

/// A Gaussian reduced to its first two moments, the unit of averaging.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSummary {
    pub mean: Vec<f64>,
    pub cov: CovRepr,
}

#[derive(Clone, Debug, PartialEq)]
pub enum CovRepr {
    /// Marginal variances.
    Diagonal(Vec<f64>),
    Full(Mat),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarycenterMode {
    Diagonal,
    Full,
}

/// Arithmetic mean of the means.
pub fn barycenter_mean(summaries: &[GaussianSummary]) -> Result<Vec<f64>> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::InvalidArgument("barycenter of an empty collection".into()))?;
    let n = first.mean.len();
    let mut out = vec![0.0; n];
    for summary in summaries {
        if summary.mean.len() != n {
            return Err(Error::DimMismatch {
                context: "barycenter_mean",
                expected: n,
                got: summary.mean.len(),
            });
        }
        for (o, m) in out.iter_mut().zip(summary.mean.iter()) {
            *o += m;
        }
    }
    let inv = 1.0 / summaries.len() as f64;
    for o in out.iter_mut() {
        *o *= inv;
    }
    Ok(out)
}

/// Closed form for diagonal covariances: elementwise squared mean of the
/// standard deviations. Note this is not the arithmetic mean of variances;
/// for inputs {1, 9} it gives 4, not 5.
pub fn barycenter_cov_diagonal(summaries: &[GaussianSummary]) -> Result<Vec<f64>> {
    let first = summaries
        .first()
        .ok_or_else(|| Error::InvalidArgument("barycenter of an empty collection".into()))?;
    let vars = |s: &GaussianSummary| -> Result<Vec<f64>> {
        match &s.cov {
            CovRepr::Diagonal(v) => Ok(v.clone()),
            CovRepr::Full(m) => Ok(m.diag()),
        }
    };
    let n = vars(first)?.len();
    let mut mean_sd = vec![0.0; n];
    for summary in summaries {
        let v = vars(summary)?;
        if v.len() != n {
            return Err(Error::DimMismatch {
                context: "barycenter_cov_diagonal",
                expected: n,
                got: v.len(),
            });
        }
        for (acc, &var) in mean_sd.iter_mut().zip(v.iter()) {
            if var <= 0.0 || var.is_nan() {
                return Err(Error::InvalidArgument(format!(
                    "nonpositive variance {var} in diagonal barycenter"
                )));
            }
            *acc += var.sqrt();
        }
    }
    let inv = 1.0 / summaries.len() as f64;
    Ok(mean_sd.iter().map(|s| (s * inv) * (s * inv)).collect())
}

#[derive(Clone, Debug)]
pub struct BarycenterResult {
    pub cov: Mat,
    pub iterations: usize,
    /// Frobenius residual of the defining equation at the returned iterate.
    pub residual: f64,
}

/// Fixed-point covariance barycenter for full covariances. Starts at the
/// arithmetic mean of the inputs and stops when the defining-equation
/// residual drops below `tol`.
pub fn barycenter_cov_fixed_point(
    summaries: &[GaussianSummary],
    tol: f64,
    max_iter: usize,
) -> Result<BarycenterResult> {
    if summaries.is_empty() {
        return Err(Error::InvalidArgument(
            "barycenter of an empty collection".into(),
        ));
    }
    if tol <= 0.0 || tol.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "tolerance must be positive, got {tol}"
        )));
    }
    let covs: Vec<Mat> = summaries
        .iter()
        .map(|s| match &s.cov {
            CovRepr::Full(m) => m.clone(),
            CovRepr::Diagonal(v) => Mat::from_diag(v),
        })
        .collect();
    let n = covs[0].rows();
    for c in &covs {
        if c.rows() != n || c.cols() != n {
            return Err(Error::DimMismatch {
                context: "barycenter_cov_fixed_point",
                expected: n,
                got: c.rows(),
            });
        }
    }
    let inv_j = 1.0 / covs.len() as f64;
    let mut current = Mat::zeros(n, n);
    for c in &covs {
        current = current.add(c)?;
    }
    let mut current = current.scale(inv_j).symmetrize();

    let mut residual = f64::INFINITY;
    for iteration in 0..max_iter {
        let (half, half_inv) = linalg::sqrtm_psd_with_inverse(&current)?;
        let mut target = Mat::zeros(n, n);
        for c in &covs {
            let inner = half.mul(c)?.mul(&half)?.symmetrize();
            target = target.add(&linalg::sqrtm_psd(&inner)?)?;
        }
        let target = target.scale(inv_j).symmetrize();
        residual = target.sub(&current)?.frobenius_norm();
        if residual < tol {
            return Ok(BarycenterResult {
                cov: current,
                iterations: iteration,
                residual,
            });
        }
        // S <- S^{-1/2} T^2 S^{-1/2}
        current = half_inv
            .mul(&target)?
            .mul(&target)?
            .mul(&half_inv)?
            .symmetrize();
    }
    Err(Error::NonConvergence {
        context: "barycenter_cov_fixed_point",
        iterations: max_iter,
        residual,
    })
}

/// Settings for the averaging algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgConfig {
    pub rounds: u64,
    pub local_steps: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub mode: BarycenterMode,
    pub barycenter_tol: f64,
    pub barycenter_max_iter: usize,
    /// Weight the theta average by shard sizes instead of uniformly.
    pub weighted_theta: bool,
    pub log_every: u64,
    /// Draws averaged into each logged objective value.
    #[serde(default = "default_elbo_samples")]
    pub elbo_samples: u64,
}

fn default_elbo_samples() -> u64 {
    1
}

impl AvgConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::InvalidArgument("rounds must be >= 1".into()));
        }
        if self.local_steps == 0 {
            return Err(Error::InvalidArgument("local_steps must be >= 1".into()));
        }
        if self.barycenter_tol <= 0.0 || self.barycenter_tol.is_nan() {
            return Err(Error::InvalidArgument(
                "barycenter tolerance must be positive".into(),
            ));
        }
        if self.elbo_samples == 0 {
            return Err(Error::InvalidArgument("elbo_samples must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// What a silo returns after a local phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AvgReport {
    pub silo_id: usize,
    pub theta: Vec<f64>,
    pub eta_g: Vec<f64>,
}

/// Silo-side state for the averaging algorithm. Local variational
/// parameters and all optimizer states persist across rounds; only
/// `(theta, eta_g)` are overwritten by the server average.
#[derive(Debug)]
pub struct AvgSiloState {
    pub silo_id: usize,
    pub shard: SiloShard,
    pub theta: Vec<f64>,
    pub q_g: GlobalVarParams,
    pub eta_l: LocalVarParams,
    pub opt_theta: AdamState,
    pub opt_eta_g: AdamState,
    pub opt_eta_l: AdamState,
    pub run_key: RngKey,
    /// N / N_j, the likelihood rescaling for local phases.
    pub scale: f64,
    /// Global step counter; noise paths are keyed by it so a single silo
    /// holding all data reproduces the per-round algorithm exactly.
    pub global_step: u64,
}

/// Run `m` local steps on the silo's data, rescaling the model term by
/// `N / N_j` in every gradient path, and return the drifted copies. Step
/// ordering matches one round of the per-round algorithm restricted to this
/// silo: draw, local parameter step, then global-side gradients against the
/// updated local parameters at the original draw.
pub fn local_training_phase(
    state: &mut AvgSiloState,
    model: &dyn Model,
    m: u64,
) -> Result<AvgReport> {
    if m == 0 {
        return Err(Error::InvalidArgument(
            "local phase needs m >= 1 steps".into(),
        ));
    }
    for _ in 0..m {
        state.global_step += 1;
        let step = state.global_step;
        let eps_g = draw_global_noise(&state.run_key, step, state.q_g.dim());
        let eps_l = draw_local_noise(&state.run_key, step, model, &state.shard);
        let z_g = state.q_g.sample(&eps_g)?;
        let z_l = state.eta_l.sample(&state.q_g.mu, &z_g, &eps_l)?;

        let local_grad = silo_local_grad_at(
            model,
            &state.shard,
            &state.theta,
            &state.eta_l,
            &state.q_g,
            &eps_g,
            &eps_l,
            &z_g,
            &z_l,
            state.scale,
        )?;
        let mut flat = state.eta_l.to_flat();
        state
            .opt_eta_l
            .step(&mut flat, &local_grad, Direction::Ascend)?;
        state.eta_l = state.eta_l.from_flat_like(&flat)?;

        let mut g_eta =
            estimator::server_prior_entropy_grad(model, &state.theta, &state.q_g, &eps_g)?;
        let contrib = silo_global_grad_contrib_at(
            model,
            &state.shard,
            &state.theta,
            &state.q_g,
            &state.eta_l,
            &eps_g,
            &eps_l,
            &z_g,
            &z_l,
            state.scale,
        )?;
        for (t, c) in g_eta.iter_mut().zip(contrib.iter()) {
            *t += c;
        }

        let mut g_theta = model.grad_prior_global(&state.theta, &z_g).wrt_theta;
        let theta_contrib = silo_theta_grad(model, &state.shard, &state.theta, &z_g, &z_l)?;
        for (t, c) in g_theta.iter_mut().zip(theta_contrib.iter()) {
            *t += state.scale * c;
        }

        state
            .opt_theta
            .step(&mut state.theta, &g_theta, Direction::Ascend)?;
        let mut flat = state.q_g.to_flat();
        state.opt_eta_g.step(&mut flat, &g_eta, Direction::Ascend)?;
        state.q_g = state.q_g.from_flat_like(&flat)?;
    }
    Ok(AvgReport {
        silo_id: state.silo_id,
        theta: state.theta.clone(),
        eta_g: state.q_g.to_flat(),
    })
}

/// Per-round barycenter diagnostics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaryRow {
    pub round: u64,
    pub bary_iters: usize,
    pub bary_residual: f64,
}

pub fn bary_rows_to_csv(rows: &[BaryRow]) -> String {
    let mut out = String::from("round,bary_iters,bary_residual\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.round, row.bary_iters, row.bary_residual
        ));
    }
    out
}

/// Completed averaging run.
#[derive(Debug)]
pub struct AvgRun {
    pub trace: TrainingTrace,
    pub bary_rows: Vec<BaryRow>,
    pub theta: Vec<f64>,
    pub q_g: GlobalVarParams,
    pub silos: Vec<AvgSiloState>,
}

fn average_reports(
    config: &AvgConfig,
    template: &GlobalVarParams,
    reports: &[AvgReport],
    weights: &[f64],
) -> Result<(Vec<f64>, GlobalVarParams, usize, f64)> {
    let mut ordered: Vec<&AvgReport> = reports.iter().collect();
    ordered.sort_by_key(|r| r.silo_id);
    for (j, report) in ordered.iter().enumerate() {
        if report.silo_id != j {
            return Err(Error::Protocol(format!(
                "averaging round missing report for silo {j}"
            )));
        }
    }

    let n_theta = ordered[0].theta.len();
    let mut theta = vec![0.0; n_theta];
    for (report, &w) in ordered.iter().zip(weights.iter()) {
        for (t, v) in theta.iter_mut().zip(report.theta.iter()) {
            *t += w * v;
        }
    }

    let summaries: Vec<GaussianSummary> = ordered
        .iter()
        .map(|report| -> Result<GaussianSummary> {
            let q = template.from_flat_like(&report.eta_g)?;
            let cov = match config.mode {
                BarycenterMode::Diagonal => CovRepr::Diagonal(q.variances()),
                BarycenterMode::Full => CovRepr::Full(q.cov()),
            };
            Ok(GaussianSummary { mean: q.mu, cov })
        })
        .collect::<Result<Vec<_>>>()?;

    let mean = barycenter_mean(&summaries)?;
    let (q_new, iters, residual) = match config.mode {
        BarycenterMode::Diagonal => {
            let vars = barycenter_cov_diagonal(&summaries)?;
            // Residual of the defining equation, evaluated elementwise.
            let mut res_sq = 0.0;
            for (i, &v_star) in vars.iter().enumerate() {
                let mut mean_term = 0.0;
                for s in &summaries {
                    let v_j = match &s.cov {
                        CovRepr::Diagonal(v) => v[i],
                        CovRepr::Full(m) => m.get(i, i),
                    };
                    mean_term += (v_star * v_j).sqrt();
                }
                mean_term /= summaries.len() as f64;
                res_sq += (v_star - mean_term) * (v_star - mean_term);
            }
            let q = GlobalVarParams::from_moments(&mean, &Mat::from_diag(&vars), true)?;
            (q, 0, res_sq.sqrt())
        }
        BarycenterMode::Full => {
            let result = barycenter_cov_fixed_point(
                &summaries,
                config.barycenter_tol,
                config.barycenter_max_iter,
            )?;
            let q = GlobalVarParams::from_moments(&mean, &result.cov, false)?;
            (q, result.iterations, result.residual)
        }
    };
    // Transplant the averaged values into the run's structure template.
    let q_g = template.from_flat_like(&q_new.to_flat())?;
    Ok((theta, q_g, iters, residual))
}

/// Full training loop: R rounds of (broadcast, m local steps per silo,
/// average).
pub fn run_sfvi_avg(config: &AvgConfig, model: &dyn Model, dataset: &Dataset) -> Result<AvgRun> {
    config.validate()?;
    dataset.validate()?;
    let template = build_global_params(model);
    if config.mode == BarycenterMode::Diagonal && template.dim() > 1 {
        let diagonal_family = matches!(&template.blocks, Some(b) if b.iter().all(|&x| x == 1));
        if !diagonal_family {
            return Err(Error::Config(
                "diagonal barycenter mode requires a diagonal global family".into(),
            ));
        }
    }

    let start = Instant::now();
    let run_key = train_noise_root(config.seed);
    let n_total = dataset.total_units();
    let mut theta = vec![0.0; model.n_theta()];
    let mut q_g = template.clone();

    let weights: Vec<f64> = if config.weighted_theta {
        dataset
            .shards
            .iter()
            .map(|s| s.units.len() as f64 / n_total as f64)
            .collect()
    } else {
        vec![1.0 / dataset.n_silos() as f64; dataset.n_silos()]
    };

    let mut silos: Vec<AvgSiloState> = dataset
        .shards
        .iter()
        .map(|shard| -> Result<AvgSiloState> {
            let eta_l = build_local_params(model, shard)?;
            Ok(AvgSiloState {
                silo_id: shard.silo_id,
                opt_theta: AdamState::new(model.n_theta(), config.optimizer),
                opt_eta_g: AdamState::new(template.eta_len(), config.optimizer),
                opt_eta_l: AdamState::new(eta_l.eta_len(), config.optimizer),
                eta_l,
                shard: shard.clone(),
                theta: theta.clone(),
                q_g: q_g.clone(),
                run_key: run_key.clone(),
                scale: n_total as f64 / shard.units.len() as f64,
                global_step: 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trace = TrainingTrace::default();
    let mut bary_rows = Vec::with_capacity(config.rounds as usize);
    let eval_root = RngKey::new(config.seed).derive(labels::EVAL);

    let eval_elbo =
        |round: u64, theta: &[f64], q_g: &GlobalVarParams, silos: &[AvgSiloState]| -> Result<f64> {
            let q_ls: Vec<LocalVarParams> = silos.iter().map(|s| s.eta_l.clone()).collect();
            estimator::elbo_mc_mean(
                model,
                dataset,
                theta,
                q_g,
                &q_ls,
                &eval_root,
                round,
                config.elbo_samples,
            )
        };

    trace.rows.push(TraceRow {
        round: 0,
        elbo: eval_elbo(0, &theta, &q_g, &silos)?,
        grad_norm_theta: 0.0,
        grad_norm_eta_g: 0.0,
        wall_ms: 0,
    });
    trace.snapshots.push(Snapshot {
        round: 0,
        theta: theta.clone(),
        eta_g: q_g.to_flat(),
    });

    for round in 1..=config.rounds {
        let mut reports = Vec::with_capacity(silos.len());
        for silo in silos.iter_mut() {
            silo.theta = theta.clone();
            silo.q_g = q_g.clone();
            reports.push(local_training_phase(silo, model, config.local_steps)?);
        }
        let (new_theta, new_q_g, iters, residual) =
            average_reports(config, &template, &reports, &weights)?;
        theta = new_theta;
        q_g = new_q_g;
        bary_rows.push(BaryRow {
            round,
            bary_iters: iters,
            bary_residual: residual,
        });
        trace.rows.push(TraceRow {
            round,
            elbo: eval_elbo(round, &theta, &q_g, &silos)?,
            grad_norm_theta: 0.0,
            grad_norm_eta_g: 0.0,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        let snap_due = config.log_every > 0 && round % config.log_every == 0;
        if snap_due || round == config.rounds {
            trace.snapshots.push(Snapshot {
                round,
                theta: theta.clone(),
                eta_g: q_g.to_flat(),
            });
        }
    }

    Ok(AvgRun {
        trace,
        bary_rows,
        theta,
        q_g,
        silos,
    })
}

impl Checkpoint {
    pub fn from_sfvi_avg(run: &AvgRun, model_id: &str, seed: u64, rounds: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            algorithm: "sfvi_avg".into(),
            model_id: model_id.into(),
            round: rounds,
            seed,
            rng_key: train_noise_root(seed),
            theta: run.theta.clone(),
            eta_g: run.q_g.clone(),
            opt_theta: None,
            opt_eta_g: None,
            silos: run
                .silos
                .iter()
                .map(|s| SiloCheckpoint {
                    silo_id: s.silo_id,
                    eta_l: s.eta_l.clone(),
                    opt_eta_l: s.opt_eta_l.clone(),
                })
                .collect(),
        }
    }
}
