//! `fedvar` command line: run experiments from a config file, spot-check
//! analytic gradients against the finite-difference oracle, and demo the
//! Gaussian barycenter solver.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use fedvar::averaging::{
    barycenter_cov_diagonal, barycenter_cov_fixed_point, barycenter_mean, CovRepr, GaussianSummary,
};
use fedvar::harness::{
    build_model, build_train_data, fd_gradient_oracle, run_experiment, ExperimentConfig, ModelId,
};
use fedvar::linalg::Mat;
use fedvar::rng::RngKey;
use fedvar::{Error, Result};

#[derive(Parser)]
#[command(
    name = "fedvar",
    about = "Federated variational inference simulator",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a TOML config.
    Run {
        /// Path to the experiment config.
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config's out_dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a model's analytic gradients against central differences.
    CheckGrads {
        /// Model id: conjugate, glmm, multinom, or hierbnn.
        model_id: String,
        /// Number of random instances per gradient block.
        #[arg(long, default_value_t = 25)]
        trials: usize,
    },
    /// Solve a small Gaussian barycenter problem and print diagnostics.
    BarycenterDemo {
        #[arg(long, value_enum, default_value_t = DemoMode::Diagonal)]
        mode: DemoMode,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoMode {
    Diagonal,
    Full,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidArgument(_) => ExitCode::from(2),
                Error::NonFinite { .. } | Error::NonConvergence { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { config, seed, out } => cmd_run(&config, seed, out),
        Command::CheckGrads { model_id, trials } => cmd_check_grads(&model_id, trials),
        Command::BarycenterDemo { mode } => cmd_barycenter_demo(mode),
    }
}

fn cmd_run(config_path: &std::path::Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = ExperimentConfig::load(config_path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let out_dir = out.or_else(|| cfg.out_dir.clone()).ok_or_else(|| {
        Error::Config("no output directory: set out_dir in the config or pass --out".into())
    })?;
    let artifacts = run_experiment(&cfg, &out_dir)?;
    println!("run complete: {}", artifacts.out_dir.display());
    println!("  final elbo: {}", artifacts.final_elbo);
    if let Some((name, value)) = &artifacts.final_metric {
        println!("  final {name}: {value}");
    }
    println!("  metrics:    {}", artifacts.metrics_path.display());
    println!("  trace:      {}", artifacts.trace_path.display());
    println!("  checkpoint: {}", artifacts.checkpoint_path.display());
    println!("  manifest:   {}", artifacts.manifest_path.display());
    Ok(())
}

fn cmd_check_grads(model_id: &str, trials: usize) -> Result<()> {
    let model_id: ModelId = model_id.parse()?;
    let mut cfg = ExperimentConfig::from_toml_str(
        "algorithm = \"sfvi\"\nmodel = \"conjugate\"\nseed = 1234\n",
    )?;
    cfg.model = model_id;
    // Small shards keep the finite-difference noise floor low.
    cfg.data.units = 12;
    cfg.data.per_silo = 8;
    cfg.model_params.subjects = 8;
    cfg.model_params.hidden = 4;
    let model = build_model(&cfg)?;
    let dataset = build_train_data(&cfg)?;
    let shard = &dataset.shards[0];
    let rtol = match model_id {
        ModelId::Hierbnn => 1e-4,
        _ => 1e-5,
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut trial = 0u64;
    while checked < trials {
        trial += 1;
        if trial > 50 * trials as u64 {
            return Err(Error::NonConvergence {
                context: "check-grads instance sampling",
                iterations: trial as usize,
                residual: f64::NAN,
            });
        }
        let key = RngKey::new(9000 + trial);
        let z_g: Vec<f64> = key.derive(0).std_normal(model.n_global());
        let z_l: Vec<f64> = key.derive(1).std_normal(model.n_local(shard));
        let theta: Vec<f64> = key
            .derive(2)
            .std_normal(model.n_theta())
            .iter()
            .map(|x| 0.5 * x)
            .collect();
        let base = model.log_local_joint(shard, &theta, &z_g, &z_l);
        if !base.is_finite() {
            continue;
        }
        // Reject instances too close to a relu kink for the network model.
        if matches!(model_id, ModelId::Hierbnn) {
            let probe = fd_gradient_oracle(
                |z| model.log_local_joint(shard, &theta, z, &z_l),
                &z_g,
                1e-3,
            );
            let fine = fd_gradient_oracle(
                |z| model.log_local_joint(shard, &theta, z, &z_l),
                &z_g,
                1e-6,
            );
            let disagreement = probe
                .iter()
                .zip(fine.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0_f64, f64::max);
            if disagreement > 1e-3 {
                continue;
            }
        }
        checked += 1;

        let grads = model.grad_local_joint(shard, &theta, &z_g, &z_l);
        let prior = model.grad_prior_global(&theta, &z_g);
        let blocks: Vec<(&str, Vec<f64>, Vec<f64>)> = vec![
            (
                "local_joint/z_g",
                grads.wrt_z_g.clone(),
                fd_gradient_oracle(|z| model.log_local_joint(shard, &theta, z, &z_l), &z_g, h),
            ),
            (
                "local_joint/z_l",
                grads.wrt_z_l.clone(),
                fd_gradient_oracle(|z| model.log_local_joint(shard, &theta, &z_g, z), &z_l, h),
            ),
            (
                "local_joint/theta",
                grads.wrt_theta.clone(),
                fd_gradient_oracle(|t| model.log_local_joint(shard, t, &z_g, &z_l), &theta, h),
            ),
            (
                "prior/z_g",
                prior.wrt_z_g.clone(),
                fd_gradient_oracle(|z| model.log_prior_global(&theta, z), &z_g, h),
            ),
            (
                "prior/theta",
                prior.wrt_theta.clone(),
                fd_gradient_oracle(|t| model.log_prior_global(t, &z_g), &theta, h),
            ),
        ];
        for (name, analytic, fd) in blocks {
            for (a, b) in analytic.iter().zip(fd.iter()) {
                let rel = (a - b).abs() / a.abs().max(b.abs()).max(1.0);
                worst = worst.max(rel);
                if rel > rtol {
                    eprintln!("block {name}: analytic {a} vs fd {b}");
                    return Err(Error::NonConvergence {
                        context: "gradient check",
                        iterations: checked,
                        residual: rel,
                    });
                }
            }
        }
    }
    println!(
        "{} gradient blocks checked over {trials} instances; worst relative error {worst:.3e} (tolerance {rtol:.0e})",
        model_id.as_str()
    );
    Ok(())
}

fn cmd_barycenter_demo(mode: DemoMode) -> Result<()> {
    let key = RngKey::new(4242);
    let n = 3;
    let summaries: Vec<GaussianSummary> = (0..3u64)
        .map(|j| {
            let mean = key.derive(j).derive(0).std_normal(n);
            match mode {
                DemoMode::Diagonal => {
                    let vars: Vec<f64> = key
                        .derive(j)
                        .derive(1)
                        .std_normal(n)
                        .iter()
                        .map(|x| (0.5 * x).exp())
                        .collect();
                    GaussianSummary {
                        mean,
                        cov: CovRepr::Diagonal(vars),
                    }
                }
                DemoMode::Full => {
                    let draws = key.derive(j).derive(1).std_normal(n * n);
                    let mut b = Mat::zeros(n, n);
                    for r in 0..n {
                        for c in 0..n {
                            b.set(r, c, 0.5 * draws[r * n + c]);
                        }
                    }
                    let cov = b
                        .mul(&b.transpose())
                        .unwrap()
                        .add(&Mat::from_diag(&vec![0.5; n]))
                        .unwrap();
                    GaussianSummary {
                        mean,
                        cov: CovRepr::Full(cov),
                    }
                }
            }
        })
        .collect();

    let mean = barycenter_mean(&summaries)?;
    println!("barycenter mean: {mean:?}");
    match mode {
        DemoMode::Diagonal => {
            let vars = barycenter_cov_diagonal(&summaries)?;
            println!("barycenter variances (closed form): {vars:?}");
        }
        DemoMode::Full => {
            let result = barycenter_cov_fixed_point(&summaries, 1e-9, 200)?;
            println!(
                "barycenter covariance after {} fixed-point iterations (residual {:.3e}):",
                result.iterations, result.residual
            );
            for i in 0..n {
                println!("  {:?}", result.cov.row(i));
            }
        }
    }
    Ok(())
}
