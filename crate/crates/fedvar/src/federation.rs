//! Per-round federated training: message schema, server and silo round
//! logic, and the in-process orchestrator.
//!
//! Exactly two message types cross the silo boundary:
//! [`ServerBroadcast`] going out and [`crate::estimator::SiloGradReport`]
//! coming back. A silo's data shard, its local variational parameters, and
//! its local draws never appear in either payload.
//!
//! Noise contract: within a run with root key `k`, round `r` uses
//!
//! * global noise: path `(r, GLOBAL)`, drawn once by the server and shared,
//! * per-unit local noise: path `(r, LOCAL, global_index)`, so a unit's
//!   draws do not depend on which silo holds it,
//! * per-silo local noise (models whose locals belong to the silo itself):
//!   path `(r, LOCAL_SILO, silo_id)`.
//!
//! With that keying, running on pooled data in one silo and running on any
//! partition of the same data consume identical noise, which is what makes
//! the trajectories coincide.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::estimator::{
    self, silo_elbo_term, silo_global_grad_contrib_at, silo_local_grad_at, silo_theta_grad,
    SiloGradReport,
};
use crate::linalg::norm2;
use crate::models::{Dataset, LocalLayout, Model, SiloShard};
use crate::optimizer::{AdamConfig, AdamState, Direction};
use crate::rng::RngKey;
use crate::vfamily::{GlobalVarParams, LocalVarParams};
use crate::{Error, Result};

/// Derivation-path labels. A run seed fans out into disjoint namespaces
/// (training, evaluation, data, prediction); under the training namespace
/// each round key fans out into the global draw and the per-unit or
/// per-silo local draws.
pub mod labels {
    pub const GLOBAL: u64 = 1;
    pub const LOCAL: u64 = 2;
    pub const LOCAL_SILO: u64 = 3;
    /// Training-noise namespace under the run seed.
    pub const TRAIN: u64 = 0;
    /// Post-averaging evaluation draws (communication-efficient variant).
    pub const EVAL: u64 = 10;
    /// Data generation (harness presets).
    pub const DATA: u64 = 100;
    /// Posterior-predictive sampling.
    pub const PREDICT: u64 = 200;
}

/// Root of the training-noise namespace for a run seed.
pub fn train_noise_root(seed: u64) -> RngKey {
    RngKey::new(seed).derive(labels::TRAIN)
}

/// What the server sends every silo at the start of a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServerBroadcast {
    pub round: u64,
    pub theta: Vec<f64>,
    /// Flat global variational parameters; silos rebuild structure from
    /// their template.
    pub eta_g: Vec<f64>,
    /// Shared global noise for the round, path `(round, GLOBAL)`.
    pub eps_g: Vec<f64>,
}

/// Run settings for the per-round algorithm.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub rounds: u64,
    pub seed: u64,
    pub optimizer: AdamConfig,
    /// Parameter snapshot cadence; 0 disables intermediate snapshots.
    pub log_every: u64,
    /// Draws averaged into each logged objective value. Training itself is
    /// always single-draw; values above 1 only smooth the reported curve.
    #[serde(default = "default_elbo_samples")]
    pub elbo_samples: u64,
}

fn default_elbo_samples() -> u64 {
    1
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.elbo_samples == 0 {
            return Err(Error::InvalidArgument("elbo_samples must be >= 1".into()));
        }
        self.optimizer.validate()
    }
}

/// Everything a silo owns. Never serialized into any message; the
/// checkpoint writer extracts fields explicitly.
#[derive(Debug)]
pub struct SiloState {
    pub silo_id: usize,
    pub shard: SiloShard,
    pub eta_l: LocalVarParams,
    pub opt: AdamState,
    pub expected_round: u64,
    /// Template describing the global parameter structure, used to rebuild
    /// broadcast flats.
    pub q_g_template: GlobalVarParams,
    pub run_key: RngKey,
}

/// Per-round local noise for one shard, following the keying contract.
pub fn draw_local_noise(
    run_key: &RngKey,
    round: u64,
    model: &dyn Model,
    shard: &SiloShard,
) -> Vec<f64> {
    let round_key = run_key.derive(round);
    match model.local_layout(shard) {
        LocalLayout::PerUnit { unit_dim } => {
            let unit_key = round_key.derive(labels::LOCAL);
            let mut eps = Vec::with_capacity(unit_dim * shard.units.len());
            for unit in &shard.units {
                eps.extend(unit_key.derive(unit.global_index).std_normal(unit_dim));
            }
            eps
        }
        LocalLayout::PerSilo { dim } => round_key
            .derive(labels::LOCAL_SILO)
            .derive(shard.silo_id as u64)
            .std_normal(dim),
    }
}

/// Global noise for a round, path `(round, GLOBAL)`.
pub fn draw_global_noise(run_key: &RngKey, round: u64, n_global: usize) -> Vec<f64> {
    run_key
        .derive(round)
        .derive(labels::GLOBAL)
        .std_normal(n_global)
}

/// Joint noise draw for a whole dataset at one round.
pub fn draw_round_noise(
    run_key: &RngKey,
    round: u64,
    model: &dyn Model,
    dataset: &Dataset,
) -> (Vec<f64>, Vec<Vec<f64>>) {
    let eps_g = draw_global_noise(run_key, round, model.n_global());
    let eps_ls = dataset
        .shards
        .iter()
        .map(|shard| draw_local_noise(run_key, round, model, shard))
        .collect();
    (eps_g, eps_ls)
}

/// Build the variational parameters a model prescribes for one shard.
pub fn build_local_params(model: &dyn Model, shard: &SiloShard) -> Result<LocalVarParams> {
    let layout = model.local_layout(shard);
    let n_l = layout.local_dim(shard);
    let structure = model.variational_structure();
    let mut q_l = LocalVarParams::new(n_l, model.n_global());
    if structure.unit_blocks {
        let blocks = match layout {
            LocalLayout::PerUnit { unit_dim } => vec![unit_dim; shard.units.len()],
            LocalLayout::PerSilo { .. } => vec![1; n_l],
        };
        q_l = q_l.with_blocks(blocks)?;
    }
    q_l.train_c = structure.train_c;
    Ok(q_l)
}

/// Build the global variational parameters a model prescribes.
pub fn build_global_params(model: &dyn Model) -> GlobalVarParams {
    if model.variational_structure().diagonal_global {
        GlobalVarParams::new_diagonal(model.n_global())
    } else {
        GlobalVarParams::new(model.n_global())
    }
}

/// One silo round, in listing order: draw local noise, materialize the
/// joint sample, take the local parameter step, then compute the report
/// pieces against the updated local parameters but the original draw.
pub fn silo_round(
    state: &mut SiloState,
    model: &dyn Model,
    broadcast: &ServerBroadcast,
) -> Result<SiloGradReport> {
    if broadcast.round != state.expected_round {
        return Err(Error::Protocol(format!(
            "silo {} expected round {}, got broadcast for round {}",
            state.silo_id, state.expected_round, broadcast.round
        )));
    }
    let q_g = state.q_g_template.from_flat_like(&broadcast.eta_g)?;
    let theta = &broadcast.theta;
    let eps_l = draw_local_noise(&state.run_key, broadcast.round, model, &state.shard);
    let z_g = q_g.sample(&broadcast.eps_g)?;
    let z_l = state.eta_l.sample(&q_g.mu, &z_g, &eps_l)?;

    let elbo_term = silo_elbo_term(
        model,
        &state.shard,
        theta,
        &state.eta_l,
        &q_g.mu,
        &z_g,
        &z_l,
    )?;

    let local_grad = silo_local_grad_at(
        model,
        &state.shard,
        theta,
        &state.eta_l,
        &q_g,
        &broadcast.eps_g,
        &eps_l,
        &z_g,
        &z_l,
        1.0,
    )?;
    let mut flat = state.eta_l.to_flat();
    state.opt.step(&mut flat, &local_grad, Direction::Ascend)?;
    state.eta_l = state.eta_l.from_flat_like(&flat)?;

    let g_eta_g = silo_global_grad_contrib_at(
        model,
        &state.shard,
        theta,
        &q_g,
        &state.eta_l,
        &broadcast.eps_g,
        &eps_l,
        &z_g,
        &z_l,
        1.0,
    )?;
    let g_theta = silo_theta_grad(model, &state.shard, theta, &z_g, &z_l)?;

    state.expected_round += 1;
    Ok(SiloGradReport {
        silo_id: state.silo_id,
        g_theta,
        g_eta_g,
        elbo_term,
    })
}

/// Scalars logged per round.
#[derive(Clone, Copy, Debug)]
pub struct RoundStats {
    pub elbo: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_eta_g: f64,
}

/// Server-side state of a run.
#[derive(Debug)]
pub struct ServerState {
    pub theta: Vec<f64>,
    pub q_g: GlobalVarParams,
    pub opt_theta: AdamState,
    pub opt_eta_g: AdamState,
    pub round: u64,
    pub run_key: RngKey,
    pub current_eps_g: Vec<f64>,
}

impl ServerState {
    pub fn new(model: &dyn Model, config: &RunConfig) -> Self {
        let q_g = build_global_params(model);
        let run_key = train_noise_root(config.seed);
        let current_eps_g = draw_global_noise(&run_key, 1, model.n_global());
        ServerState {
            theta: vec![0.0; model.n_theta()],
            opt_theta: AdamState::new(model.n_theta(), config.optimizer),
            opt_eta_g: AdamState::new(q_g.eta_len(), config.optimizer),
            q_g,
            round: 1,
            run_key,
            current_eps_g,
        }
    }

    /// Broadcast for the current round.
    pub fn broadcast(&self) -> ServerBroadcast {
        ServerBroadcast {
            round: self.round,
            theta: self.theta.clone(),
            eta_g: self.q_g.to_flat(),
            eps_g: self.current_eps_g.clone(),
        }
    }

    /// Consume the round's reports, update `(theta, eta_g)`, and produce
    /// the next broadcast. The reduction over reports is an ordered fold by
    /// silo id, so arrival order cannot change the result.
    pub fn server_round(
        &mut self,
        model: &dyn Model,
        reports: &[SiloGradReport],
    ) -> Result<(ServerBroadcast, RoundStats)> {
        let z_g = self.q_g.sample(&self.current_eps_g)?;
        let server_term = estimator::server_prior_entropy_grad(
            model,
            &self.theta,
            &self.q_g,
            &self.current_eps_g,
        )?;
        let g_eta = estimator::server_global_grad(&server_term, reports)?;
        let g_theta = estimator::server_theta_grad(model, &self.theta, &z_g, reports)?;

        let l0 = estimator::server_elbo_term(model, &self.theta, &self.q_g, &z_g)?;
        let mut elbo = l0;
        let mut ordered: Vec<&SiloGradReport> = reports.iter().collect();
        ordered.sort_by_key(|r| r.silo_id);
        for report in ordered {
            elbo += report.elbo_term;
        }

        self.opt_theta
            .step(&mut self.theta, &g_theta, Direction::Ascend)?;
        let mut flat = self.q_g.to_flat();
        self.opt_eta_g.step(&mut flat, &g_eta, Direction::Ascend)?;
        self.q_g = self.q_g.from_flat_like(&flat)?;

        self.round += 1;
        self.current_eps_g = draw_global_noise(&self.run_key, self.round, self.q_g.dim());
        Ok((
            self.broadcast(),
            RoundStats {
                elbo,
                grad_norm_theta: norm2(&g_theta),
                grad_norm_eta_g: norm2(&g_eta),
            },
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub round: u64,
    pub elbo: f64,
    pub grad_norm_theta: f64,
    pub grad_norm_eta_g: f64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub round: u64,
    pub theta: Vec<f64>,
    pub eta_g: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub rows: Vec<TraceRow>,
    pub snapshots: Vec<Snapshot>,
}

impl TrainingTrace {
    /// `round,elbo,grad_norm_theta,grad_norm_etaG,wall_ms` CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,elbo,grad_norm_theta,grad_norm_etaG,wall_ms\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                row.round, row.elbo, row.grad_norm_theta, row.grad_norm_eta_g, row.wall_ms
            ));
        }
        out
    }
}

/// Completed run: final states plus the training trace.
#[derive(Debug)]
pub struct SfviRun {
    pub trace: TrainingTrace,
    pub server: ServerState,
    pub silos: Vec<SiloState>,
}

/// Full training loop. Silos are simulated sequentially; the computation is
/// identical under any scheduling because all cross-silo coupling flows
/// through the two message types and the server reduction is an ordered
/// fold.
pub fn run_sfvi(config: &RunConfig, model: &dyn Model, dataset: &Dataset) -> Result<SfviRun> {
    config.validate()?;
    dataset.validate()?;
    let start = Instant::now();
    let mut server = ServerState::new(model, config);
    let mut silos: Vec<SiloState> = dataset
        .shards
        .iter()
        .map(|shard| -> Result<SiloState> {
            let eta_l = build_local_params(model, shard)?;
            Ok(SiloState {
                silo_id: shard.silo_id,
                opt: AdamState::new(eta_l.eta_len(), config.optimizer),
                eta_l,
                shard: shard.clone(),
                expected_round: 1,
                q_g_template: server.q_g.clone(),
                run_key: server.run_key.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut trace = TrainingTrace::default();
    let eval_root = RngKey::new(config.seed).derive(labels::EVAL);

    // Initial-state row, round 0: an objective estimate at the starting
    // parameters.
    {
        let q_ls: Vec<LocalVarParams> = silos.iter().map(|s| s.eta_l.clone()).collect();
        let elbo = estimator::elbo_mc_mean(
            model,
            dataset,
            &server.theta,
            &server.q_g,
            &q_ls,
            &eval_root,
            0,
            config.elbo_samples,
        )?;
        trace.rows.push(TraceRow {
            round: 0,
            elbo,
            grad_norm_theta: 0.0,
            grad_norm_eta_g: 0.0,
            wall_ms: 0,
        });
        trace.snapshots.push(Snapshot {
            round: 0,
            theta: server.theta.clone(),
            eta_g: server.q_g.to_flat(),
        });
    }
    let mut broadcast = server.broadcast();
    for round in 1..=config.rounds {
        // Optional smoothed objective diagnostic at the round's starting
        // parameters; the gradient step itself stays single-draw.
        let smoothed = if config.elbo_samples > 1 {
            let q_g = server.q_g.clone();
            let q_ls: Vec<LocalVarParams> = silos.iter().map(|s| s.eta_l.clone()).collect();
            Some(estimator::elbo_mc_mean(
                model,
                dataset,
                &server.theta,
                &q_g,
                &q_ls,
                &eval_root,
                round,
                config.elbo_samples,
            )?)
        } else {
            None
        };
        let reports: Vec<SiloGradReport> = silos
            .iter_mut()
            .map(|silo| silo_round(silo, model, &broadcast))
            .collect::<Result<Vec<_>>>()?;
        let (next, stats) = server.server_round(model, &reports)?;
        broadcast = next;
        trace.rows.push(TraceRow {
            round,
            elbo: smoothed.unwrap_or(stats.elbo),
            grad_norm_theta: stats.grad_norm_theta,
            grad_norm_eta_g: stats.grad_norm_eta_g,
            wall_ms: start.elapsed().as_millis() as u64,
        });
        let snap_due = config.log_every > 0 && round % config.log_every == 0;
        if snap_due || round == config.rounds {
            trace.snapshots.push(Snapshot {
                round,
                theta: server.theta.clone(),
                eta_g: server.q_g.to_flat(),
            });
        }
    }

    Ok(SfviRun {
        trace,
        server,
        silos,
    })
}

/// On-disk training state. The orchestrator owns every silo in-process, so
/// the checkpoint may carry the local sections; they are never part of a
/// federation message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub algorithm: String,
    pub model_id: String,
    pub round: u64,
    pub seed: u64,
    /// Root of the training-noise namespace, so a resumed run replays the
    /// same derivation paths.
    pub rng_key: RngKey,
    pub theta: Vec<f64>,
    pub eta_g: GlobalVarParams,
    pub opt_theta: Option<AdamState>,
    pub opt_eta_g: Option<AdamState>,
    pub silos: Vec<SiloCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiloCheckpoint {
    pub silo_id: usize,
    pub eta_l: LocalVarParams,
    pub opt_eta_l: AdamState,
}

pub const CHECKPOINT_VERSION: u32 = 1;

impl Checkpoint {
    pub fn from_sfvi(run: &SfviRun, model_id: &str, seed: u64) -> Self {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            algorithm: "sfvi".into(),
            model_id: model_id.into(),
            round: run.server.round - 1,
            seed,
            rng_key: run.server.run_key.clone(),
            theta: run.server.theta.clone(),
            eta_g: run.server.q_g.clone(),
            opt_theta: Some(run.server.opt_theta.clone()),
            opt_eta_g: Some(run.server.opt_eta_g.clone()),
            silos: run
                .silos
                .iter()
                .map(|s| SiloCheckpoint {
                    silo_id: s.silo_id,
                    eta_l: s.eta_l.clone(),
                    opt_eta_l: s.opt.clone(),
                })
                .collect(),
        }
    }
}
