//! Experiment runner: builds the model and data from a config, trains, and
//! writes artifacts (metrics CSV, trace CSV, checkpoint, manifest) to the
//! output directory.
//!
//! The metrics CSV is deterministic for a fixed config and seed; wall-clock
//! times live only in the trace CSV.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{AlgorithmId, DataSource, ExperimentConfig, ModelId};
use super::metrics::{accuracy, gaussian_kl_univariate};
use super::predict::posterior_predict;
use crate::averaging::{bary_rows_to_csv, run_sfvi_avg, AvgConfig};
use crate::federation::{labels, run_sfvi, Checkpoint, RunConfig, TrainingTrace};
use crate::models::{
    self, gen_conjugate_units, gen_glmm_units, gen_heterogeneous_classification,
    ConjugateGaussianModel, Dataset, LogisticMixedModel, Model, MultinomRegModel, ToyHierBnnModel,
};
use crate::rng::RngKey;
use crate::vfamily::GlobalVarParams;
use crate::{Error, Result};

pub fn build_model(cfg: &ExperimentConfig) -> Result<Box<dyn Model>> {
    let p = &cfg.model_params;
    Ok(match cfg.model {
        ModelId::Conjugate => {
            Box::new(ConjugateGaussianModel::new(p.tau, p.lambda, p.noise_sd).map_err(as_config)?)
        }
        ModelId::Glmm => Box::new(LogisticMixedModel::new()),
        ModelId::Multinom => {
            Box::new(MultinomRegModel::new(p.features, p.classes).map_err(as_config)?)
        }
        ModelId::Hierbnn => {
            Box::new(ToyHierBnnModel::new(p.features, p.hidden, p.classes).map_err(as_config)?)
        }
    })
}

fn as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => Error::Config(msg),
        other => other,
    }
}

fn data_key(seed: u64) -> RngKey {
    RngKey::new(seed).derive(labels::DATA)
}

pub fn build_train_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    let dataset = match cfg.data.source {
        DataSource::Csv => {
            let path = cfg.data.path.as_ref().expect("validated");
            match cfg.model {
                ModelId::Glmm => models::io::load_glmm_csv(path, cfg.data.silos)?,
                _ => models::io::load_classification_csv(path)?,
            }
        }
        DataSource::Generate => {
            let key = data_key(cfg.seed).derive(0);
            let p = &cfg.model_params;
            match cfg.model {
                ModelId::Conjugate => {
                    let units =
                        gen_conjugate_units(&key, cfg.data.units, p.tau, p.lambda, p.noise_sd);
                    Dataset::partition_contiguous(units, cfg.data.silos).map_err(as_config)?
                }
                ModelId::Glmm => {
                    let units = gen_glmm_units(&key, p.subjects, p.visits);
                    Dataset::partition_contiguous(units, cfg.data.silos).map_err(as_config)?
                }
                ModelId::Multinom | ModelId::Hierbnn => gen_heterogeneous_classification(
                    &key,
                    cfg.data.silos,
                    cfg.data.per_silo,
                    p.features,
                    p.classes,
                    p.skew,
                )
                .map_err(as_config)?,
            }
        }
    };
    dataset.validate().map_err(as_config)?;
    validate_against_model(cfg, &dataset)?;
    Ok(dataset)
}

/// Held-out data for classification metrics, generated with an independent
/// key but the same class geometry.
pub fn build_test_data(cfg: &ExperimentConfig) -> Result<Option<Dataset>> {
    match (cfg.model, cfg.data.source) {
        (ModelId::Multinom | ModelId::Hierbnn, DataSource::Generate) => {
            let key = data_key(cfg.seed).derive(1);
            let p = &cfg.model_params;
            Ok(Some(gen_heterogeneous_classification(
                &key,
                cfg.data.silos,
                cfg.data.test_per_silo,
                p.features,
                p.classes,
                p.skew,
            )?))
        }
        _ => Ok(None),
    }
}

fn validate_against_model(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    match cfg.model {
        ModelId::Glmm => {
            for shard in &dataset.shards {
                LogisticMixedModel::validate_shard(shard).map_err(as_config)?;
            }
        }
        ModelId::Multinom => {
            let m = MultinomRegModel::new(cfg.model_params.features, cfg.model_params.classes)
                .map_err(as_config)?;
            for shard in &dataset.shards {
                m.validate_shard(shard).map_err(as_config)?;
            }
        }
        _ => {}
    }
    Ok(())
}

/// Paths of the artifacts a run writes, plus headline numbers.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub metrics_path: PathBuf,
    pub trace_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub manifest_path: PathBuf,
    pub final_elbo: f64,
    pub final_metric: Option<(String, f64)>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    version: &'static str,
    seed: u64,
    config: &'a ExperimentConfig,
}

/// Per-round metric rows. The model-specific column is filled where it is
/// defined (snapshot rounds for posterior divergence, the final round for
/// held-out accuracy) and empty elsewhere.
fn metrics_csv(trace: &TrainingTrace, model_metric: &str, values: &[(u64, f64)]) -> String {
    let mut out = String::from("round,elbo");
    if !model_metric.is_empty() {
        let _ = write!(out, ",{model_metric}");
    }
    out.push('\n');
    for row in &trace.rows {
        let _ = write!(out, "{},{}", row.round, row.elbo);
        if !model_metric.is_empty() {
            match values.iter().find(|(r, _)| *r == row.round) {
                Some((_, v)) => {
                    let _ = write!(out, ",{v}");
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// Run the configured experiment and write all artifacts under `out_dir`.
/// Nothing is written until the configuration, model, and data have all
/// validated.
pub fn run_experiment(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunArtifacts> {
    cfg.validate()?;
    let model = build_model(cfg)?;
    let dataset = build_train_data(cfg)?;
    let test_data = build_test_data(cfg)?;

    let (trace, checkpoint, bary_csv) = match cfg.algorithm {
        AlgorithmId::Sfvi => {
            let run_config = RunConfig {
                rounds: cfg.sfvi.rounds,
                seed: cfg.seed,
                optimizer: cfg.optimizer.into(),
                log_every: cfg.sfvi.log_every,
                elbo_samples: cfg.sfvi.elbo_samples,
            };
            let run = run_sfvi(&run_config, model.as_ref(), &dataset)?;
            let checkpoint = Checkpoint::from_sfvi(&run, cfg.model.as_str(), cfg.seed);
            (run.trace, checkpoint, None)
        }
        AlgorithmId::SfviAvg => {
            let avg_config = AvgConfig {
                rounds: cfg.sfvi_avg.rounds,
                local_steps: cfg.sfvi_avg.local_steps,
                seed: cfg.seed,
                optimizer: cfg.optimizer.into(),
                mode: cfg.sfvi_avg.barycenter,
                barycenter_tol: cfg.sfvi_avg.barycenter_tol,
                barycenter_max_iter: cfg.sfvi_avg.barycenter_max_iter,
                weighted_theta: cfg.sfvi_avg.weighted_theta,
                log_every: cfg.sfvi.log_every,
                elbo_samples: cfg.sfvi.elbo_samples,
            };
            let run = run_sfvi_avg(&avg_config, model.as_ref(), &dataset)?;
            let checkpoint =
                Checkpoint::from_sfvi_avg(&run, cfg.model.as_str(), cfg.seed, avg_config.rounds);
            (
                run.trace,
                checkpoint,
                Some(bary_rows_to_csv(&run.bary_rows)),
            )
        }
    };

    // Model-specific metric column.
    let (metric_name, metric_values, final_metric) = match cfg.model {
        ModelId::Conjugate => {
            let conj = ConjugateGaussianModel::new(
                cfg.model_params.tau,
                cfg.model_params.lambda,
                cfg.model_params.noise_sd,
            )?;
            let post = conj.exact_posterior(&dataset);
            let values: Vec<(u64, f64)> = trace
                .snapshots
                .iter()
                .map(|snap| -> Result<(u64, f64)> {
                    let q = GlobalVarParams::new(1).from_flat_like(&snap.eta_g)?;
                    let kl =
                        gaussian_kl_univariate(q.mu[0], q.variances()[0], post.mean_g, post.var_g)?;
                    Ok((snap.round, kl))
                })
                .collect::<Result<Vec<_>>>()?;
            let last = values.last().map(|(_, v)| ("kl_to_exact".to_string(), *v));
            ("kl_to_exact", values, last)
        }
        ModelId::Multinom | ModelId::Hierbnn => {
            if let Some(test) = &test_data {
                let probs = posterior_predict(model.as_ref(), &checkpoint, test, 100)?;
                let truth: Vec<usize> = test
                    .shards
                    .iter()
                    .flat_map(|s| s.units.iter().flat_map(|u| u.rows.iter()))
                    .map(|r| r.label as usize)
                    .collect();
                let acc = accuracy(&probs, &truth);
                let round = trace.rows.last().map_or(0, |r| r.round);
                (
                    "accuracy",
                    vec![(round, acc)],
                    Some(("accuracy".to_string(), acc)),
                )
            } else {
                ("", vec![], None)
            }
        }
        ModelId::Glmm => ("", vec![], None),
    };

    std::fs::create_dir_all(out_dir)?;
    let metrics_path = out_dir.join("metrics.csv");
    let trace_path = out_dir.join("trace.csv");
    let checkpoint_path = out_dir.join("checkpoint.json");
    let manifest_path = out_dir.join("manifest.json");

    std::fs::write(
        &metrics_path,
        metrics_csv(&trace, metric_name, &metric_values),
    )?;
    std::fs::write(&trace_path, trace.to_csv())?;
    std::fs::write(
        &checkpoint_path,
        serde_json::to_string_pretty(&checkpoint).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    let manifest = Manifest {
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        config: cfg,
    };
    std::fs::write(
        &manifest_path,
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::Config(e.to_string()))?,
    )?;
    if let Some(csv) = bary_csv {
        std::fs::write(out_dir.join("barycenter.csv"), csv)?;
    }

    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        metrics_path,
        trace_path,
        checkpoint_path,
        manifest_path,
        final_elbo: trace.rows.last().map_or(f64::NAN, |r| r.elbo),
        final_metric,
    })
}
