//! Averaging-algorithm tests: degeneration to the per-round algorithm with
//! one silo, a hand-assembled single-step oracle, convergence on the
//! conjugate model, and phase determinism.

mod common;

use common::*;
use fedvar::averaging::{
    bary_rows_to_csv, barycenter_cov_diagonal, barycenter_mean, local_training_phase, run_sfvi_avg,
    AvgConfig, AvgSiloState, BarycenterMode, CovRepr, GaussianSummary,
};
use fedvar::estimator::{
    server_prior_entropy_grad, silo_global_grad_contrib_at, silo_local_grad_at, silo_theta_grad,
};
use fedvar::federation::{
    build_global_params, build_local_params, draw_global_noise, draw_local_noise, labels, run_sfvi,
    train_noise_root, RunConfig,
};
use fedvar::harness::gaussian_kl_univariate;
use fedvar::models::{gen_conjugate_units, ConjugateGaussianModel, Dataset, Model};
use fedvar::optimizer::{AdamConfig, AdamState, Direction};
use fedvar::rng::RngKey;

fn conjugate_problem(n: usize, silos: usize, data_seed: u64) -> (ConjugateGaussianModel, Dataset) {
    let model = ConjugateGaussianModel::new(1.0, 1.0, 1.0).unwrap();
    let units = gen_conjugate_units(
        &RngKey::new(data_seed).derive(labels::DATA),
        n,
        1.0,
        1.0,
        1.0,
    );
    (model, Dataset::partition_contiguous(units, silos).unwrap())
}

fn avg_config(
    rounds: u64,
    local_steps: u64,
    seed: u64,
    lr: f64,
    mode: BarycenterMode,
) -> AvgConfig {
    AvgConfig {
        rounds,
        local_steps,
        seed,
        optimizer: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        mode,
        barycenter_tol: 1e-9,
        barycenter_max_iter: 200,
        weighted_theta: false,
        log_every: 0,
        elbo_samples: 1,
    }
}

#[test]
fn single_silo_degenerates_to_the_per_round_algorithm() {
    // One silo holding all data: the scale factor is 1 and every local step
    // keys its noise exactly like a per-round iteration, so R rounds of m
    // steps must match R*m rounds of the per-round algorithm up to the
    // covariance factorization round trips at averaging time.
    let (model, ds) = conjugate_problem(40, 1, 3);
    let seed = 99;
    let avg = run_sfvi_avg(
        &avg_config(3, 50, seed, 2e-3, BarycenterMode::Full),
        &model,
        &ds,
    )
    .unwrap();
    let sfvi = run_sfvi(
        &RunConfig {
            rounds: 150,
            seed,
            optimizer: AdamConfig {
                lr: 2e-3,
                ..AdamConfig::default()
            },
            log_every: 0,
            elbo_samples: 1,
        },
        &model,
        &ds,
    )
    .unwrap();

    assert_vec_close_rel(
        &avg.q_g.to_flat(),
        &sfvi.server.q_g.to_flat(),
        1e-9,
        "eta_g",
    );
    assert_vec_close_rel(
        &avg.silos[0].eta_l.to_flat(),
        &sfvi.silos[0].eta_l.to_flat(),
        1e-9,
        "eta_l",
    );
    assert_eq!(avg.theta, sfvi.server.theta);
}

#[test]
fn one_round_one_step_matches_hand_assembled_update() {
    let (model, ds) = conjugate_problem(10, 2, 5);
    let seed = 7;
    let lr = 1e-3;
    let n_total = ds.total_units();
    let run = run_sfvi_avg(
        &avg_config(1, 1, seed, lr, BarycenterMode::Diagonal),
        &model,
        &ds,
    )
    .unwrap();

    // Oracle: one local step per silo from the shared start, then the mean
    // of means and the squared mean of standard deviations.
    let root = train_noise_root(seed);
    let mut thetas = Vec::new();
    let mut summaries = Vec::new();
    let mut eta_ls = Vec::new();
    for shard in &ds.shards {
        let scale = n_total as f64 / shard.units.len() as f64;
        let mut q_g = build_global_params(&model);
        let mut eta_l = build_local_params(&model, shard).unwrap();
        let mut theta: Vec<f64> = vec![];
        let mut opt_l = AdamState::new(
            eta_l.eta_len(),
            avg_config(1, 1, seed, lr, BarycenterMode::Diagonal).optimizer,
        );
        let mut opt_g = AdamState::new(q_g.eta_len(), opt_l.config);
        let mut opt_t = AdamState::new(0, opt_l.config);

        let eps_g = draw_global_noise(&root, 1, q_g.dim());
        let eps_l = draw_local_noise(&root, 1, &model, shard);
        let z_g = q_g.sample(&eps_g).unwrap();
        let z_l = eta_l.sample(&q_g.mu, &z_g, &eps_l).unwrap();

        let lg = silo_local_grad_at(
            &model, shard, &theta, &eta_l, &q_g, &eps_g, &eps_l, &z_g, &z_l, scale,
        )
        .unwrap();
        let mut flat = eta_l.to_flat();
        opt_l.step(&mut flat, &lg, Direction::Ascend).unwrap();
        eta_l = eta_l.from_flat_like(&flat).unwrap();

        let mut g_eta = server_prior_entropy_grad(&model, &theta, &q_g, &eps_g).unwrap();
        let contrib = silo_global_grad_contrib_at(
            &model, shard, &theta, &q_g, &eta_l, &eps_g, &eps_l, &z_g, &z_l, scale,
        )
        .unwrap();
        for (t, c) in g_eta.iter_mut().zip(contrib.iter()) {
            *t += c;
        }
        let mut g_theta = model.grad_prior_global(&theta, &z_g).wrt_theta;
        let tc = silo_theta_grad(&model, shard, &theta, &z_g, &z_l).unwrap();
        for (t, c) in g_theta.iter_mut().zip(tc.iter()) {
            *t += scale * c;
        }
        opt_t.step(&mut theta, &g_theta, Direction::Ascend).unwrap();
        let mut flat = q_g.to_flat();
        opt_g.step(&mut flat, &g_eta, Direction::Ascend).unwrap();
        q_g = q_g.from_flat_like(&flat).unwrap();

        thetas.push(theta);
        summaries.push(GaussianSummary {
            mean: q_g.mu.clone(),
            cov: CovRepr::Diagonal(q_g.variances()),
        });
        eta_ls.push(eta_l);
    }

    let want_mu = barycenter_mean(&summaries).unwrap();
    let want_vars = barycenter_cov_diagonal(&summaries).unwrap();
    assert_vec_close_abs(&run.q_g.mu, &want_mu, 1e-14, "averaged mean");
    let got_vars = run.q_g.variances();
    assert_vec_close_abs(&got_vars, &want_vars, 1e-14, "averaged variances");
    assert!(thetas.iter().all(|t| t.is_empty()) && run.theta.is_empty());
    for (got, want) in run.silos.iter().zip(eta_ls.iter()) {
        assert_vec_close_abs(&got.eta_l.to_flat(), &want.to_flat(), 1e-14, "silo eta_l");
    }
}

#[test]
fn conjugate_averaging_run_approaches_exact_posterior() {
    let (model, ds) = conjugate_problem(60, 3, 11);
    let run = run_sfvi_avg(
        &avg_config(8, 100, 21, 1e-2, BarycenterMode::Diagonal),
        &model,
        &ds,
    )
    .unwrap();
    let post = model.exact_posterior(&ds);
    let kl = gaussian_kl_univariate(
        run.q_g.mu[0],
        run.q_g.variances()[0],
        post.mean_g,
        post.var_g,
    )
    .unwrap();
    assert!(kl < 0.05, "KL after 8 averaging rounds: {kl}");
    // Objective trace should be increasing overall.
    let first = run.trace.rows.first().unwrap().elbo;
    let last = run.trace.rows.last().unwrap().elbo;
    assert!(last > first, "objective did not improve: {first} -> {last}");
}

#[test]
fn local_phase_requires_at_least_one_step() {
    let (model, ds) = conjugate_problem(10, 1, 13);
    let cfg = avg_config(1, 1, 31, 1e-3, BarycenterMode::Diagonal);
    let q_g = build_global_params(&model);
    let eta_l = build_local_params(&model, &ds.shards[0]).unwrap();
    let mut state = AvgSiloState {
        silo_id: 0,
        shard: ds.shards[0].clone(),
        theta: vec![],
        opt_theta: AdamState::new(0, cfg.optimizer),
        opt_eta_g: AdamState::new(q_g.eta_len(), cfg.optimizer),
        opt_eta_l: AdamState::new(eta_l.eta_len(), cfg.optimizer),
        q_g,
        eta_l,
        run_key: train_noise_root(31),
        scale: 1.0,
        global_step: 0,
    };
    assert!(local_training_phase(&mut state, &model, 0).is_err());
    assert!(local_training_phase(&mut state, &model, 1).is_ok());
}

#[test]
fn identical_silos_produce_identical_phases() {
    // Two silos holding byte-identical shards (same global indices, so the
    // same noise paths) drift to identical copies.
    let (model, ds) = conjugate_problem(12, 1, 17);
    let cfg = avg_config(1, 25, 41, 1e-3, BarycenterMode::Diagonal);
    let make_state = |silo_id: usize| {
        let q_g = build_global_params(&model);
        let eta_l = build_local_params(&model, &ds.shards[0]).unwrap();
        AvgSiloState {
            silo_id,
            shard: ds.shards[0].clone(),
            theta: vec![],
            opt_theta: AdamState::new(0, cfg.optimizer),
            opt_eta_g: AdamState::new(q_g.eta_len(), cfg.optimizer),
            opt_eta_l: AdamState::new(eta_l.eta_len(), cfg.optimizer),
            q_g,
            eta_l,
            run_key: train_noise_root(41),
            scale: 2.0,
            global_step: 0,
        }
    };
    let mut a = make_state(0);
    let mut b = make_state(1);
    let ra = local_training_phase(&mut a, &model, 25).unwrap();
    let rb = local_training_phase(&mut b, &model, 25).unwrap();
    assert_eq!(ra.theta, rb.theta);
    assert_eq!(ra.eta_g, rb.eta_g);
    assert_eq!(a.eta_l, b.eta_l);
}

#[test]
fn barycenter_diagnostics_csv_has_one_row_per_round() {
    let (model, ds) = conjugate_problem(20, 2, 19);
    let run = run_sfvi_avg(
        &avg_config(4, 10, 51, 1e-3, BarycenterMode::Full),
        &model,
        &ds,
    )
    .unwrap();
    assert_eq!(run.bary_rows.len(), 4);
    for row in &run.bary_rows {
        assert!(
            row.bary_residual < 1e-9,
            "round {}: residual {}",
            row.round,
            row.bary_residual
        );
    }
    let csv = bary_rows_to_csv(&run.bary_rows);
    assert_eq!(
        csv.lines().next().unwrap(),
        "round,bary_iters,bary_residual"
    );
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn avg_reports_expose_only_the_contracted_fields() {
    let report = fedvar::averaging::AvgReport {
        silo_id: 0,
        theta: vec![],
        eta_g: vec![0.0],
    };
    let json: serde_json::Value =
        serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    let mut keys: Vec<&str> = json
        .as_object()
        .unwrap()
        .keys()
        .map(|s| s.as_str())
        .collect();
    keys.sort_unstable();
    assert_eq!(keys, vec!["eta_g", "silo_id", "theta"]);
}
