//! Experiment configuration. Configs are TOML files; every run is fully
//! reproducible from the config plus the seed recorded in the manifest.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::averaging::BarycenterMode;
use crate::optimizer::AdamConfig;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlgorithmId {
    Sfvi,
    SfviAvg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelId {
    Conjugate,
    Glmm,
    Multinom,
    Hierbnn,
}

impl FromStr for ModelId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conjugate" => Ok(ModelId::Conjugate),
            "glmm" => Ok(ModelId::Glmm),
            "multinom" => Ok(ModelId::Multinom),
            "hierbnn" => Ok(ModelId::Hierbnn),
            other => Err(Error::Config(format!(
                "unknown model id {other:?}; expected conjugate, glmm, multinom, or hierbnn"
            ))),
        }
    }
}

impl ModelId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelId::Conjugate => "conjugate",
            ModelId::Glmm => "glmm",
            ModelId::Multinom => "multinom",
            ModelId::Hierbnn => "hierbnn",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfviSection {
    #[serde(default = "default_rounds")]
    pub rounds: u64,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
    /// Draws averaged into each logged objective value (diagnostics only;
    /// training always steps on a single draw).
    #[serde(default = "default_elbo_samples")]
    pub elbo_samples: u64,
}

fn default_elbo_samples() -> u64 {
    1
}

fn default_rounds() -> u64 {
    1000
}

fn default_log_every() -> u64 {
    100
}

impl Default for SfviSection {
    fn default() -> Self {
        SfviSection {
            rounds: default_rounds(),
            log_every: default_log_every(),
            elbo_samples: default_elbo_samples(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SfviAvgSection {
    #[serde(default = "default_avg_rounds")]
    pub rounds: u64,
    #[serde(default = "default_local_steps")]
    pub local_steps: u64,
    #[serde(default = "default_barycenter_mode")]
    pub barycenter: BarycenterMode,
    #[serde(default = "default_barycenter_tol")]
    pub barycenter_tol: f64,
    #[serde(default = "default_barycenter_max_iter")]
    pub barycenter_max_iter: usize,
    #[serde(default)]
    pub weighted_theta: bool,
    #[serde(default = "default_elbo_samples")]
    pub elbo_samples: u64,
}

fn default_avg_rounds() -> u64 {
    20
}

fn default_local_steps() -> u64 {
    200
}

fn default_barycenter_mode() -> BarycenterMode {
    BarycenterMode::Diagonal
}

fn default_barycenter_tol() -> f64 {
    1e-9
}

fn default_barycenter_max_iter() -> usize {
    200
}

impl Default for SfviAvgSection {
    fn default() -> Self {
        SfviAvgSection {
            rounds: default_avg_rounds(),
            local_steps: default_local_steps(),
            barycenter: default_barycenter_mode(),
            barycenter_tol: default_barycenter_tol(),
            barycenter_max_iter: default_barycenter_max_iter(),
            weighted_theta: false,
            elbo_samples: default_elbo_samples(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    1e-3
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerSection {
    fn default() -> Self {
        OptimizerSection {
            lr: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl From<OptimizerSection> for AdamConfig {
    fn from(s: OptimizerSection) -> AdamConfig {
        AdamConfig {
            lr: s.lr,
            beta1: s.beta1,
            beta2: s.beta2,
            eps: s.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Generate,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default = "default_source")]
    pub source: DataSource,
    pub path: Option<PathBuf>,
    #[serde(default = "default_silos")]
    pub silos: usize,
    /// Unit count for generated conjugate data.
    #[serde(default = "default_units")]
    pub units: usize,
    /// Training observations per silo for generated classification data.
    #[serde(default = "default_per_silo")]
    pub per_silo: usize,
    /// Held-out observations per silo for generated classification data.
    #[serde(default = "default_test_per_silo")]
    pub test_per_silo: usize,
}

fn default_source() -> DataSource {
    DataSource::Generate
}

fn default_silos() -> usize {
    2
}

fn default_units() -> usize {
    200
}

fn default_per_silo() -> usize {
    150
}

fn default_test_per_silo() -> usize {
    100
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            source: default_source(),
            path: None,
            silos: default_silos(),
            units: default_units(),
            per_silo: default_per_silo(),
            test_per_silo: default_test_per_silo(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParamsSection {
    #[serde(default = "default_unit_scale")]
    pub tau: f64,
    #[serde(default = "default_unit_scale")]
    pub lambda: f64,
    #[serde(default = "default_unit_scale")]
    pub noise_sd: f64,
    #[serde(default = "default_subjects")]
    pub subjects: usize,
    #[serde(default = "default_visits")]
    pub visits: usize,
    #[serde(default = "default_features")]
    pub features: usize,
    #[serde(default = "default_classes")]
    pub classes: usize,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_skew")]
    pub skew: f64,
}

fn default_unit_scale() -> f64 {
    1.0
}

fn default_subjects() -> usize {
    537
}

fn default_visits() -> usize {
    4
}

fn default_features() -> usize {
    2
}

fn default_classes() -> usize {
    4
}

fn default_hidden() -> usize {
    8
}

fn default_skew() -> f64 {
    0.9
}

impl Default for ModelParamsSection {
    fn default() -> Self {
        ModelParamsSection {
            tau: default_unit_scale(),
            lambda: default_unit_scale(),
            noise_sd: default_unit_scale(),
            subjects: default_subjects(),
            visits: default_visits(),
            features: default_features(),
            classes: default_classes(),
            hidden: default_hidden(),
            skew: default_skew(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmId,
    pub model: ModelId,
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub sfvi: SfviSection,
    #[serde(default)]
    pub sfvi_avg: SfviAvgSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub model_params: ModelParamsSection,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let adam: AdamConfig = self.optimizer.into();
        adam.validate().map_err(reclass_as_config)?;
        if self.sfvi.rounds == 0 {
            return Err(Error::Config("sfvi.rounds must be >= 1".into()));
        }
        if self.sfvi_avg.rounds == 0 || self.sfvi_avg.local_steps == 0 {
            return Err(Error::Config(
                "sfvi_avg.rounds and sfvi_avg.local_steps must be >= 1".into(),
            ));
        }
        if self.sfvi.elbo_samples == 0 || self.sfvi_avg.elbo_samples == 0 {
            return Err(Error::Config("elbo_samples must be >= 1".into()));
        }
        if self.data.silos == 0 {
            return Err(Error::Config("data.silos must be >= 1".into()));
        }
        match self.data.source {
            DataSource::Csv => {
                let path = self.data.path.as_ref().ok_or_else(|| {
                    Error::Config("data.source = \"csv\" requires data.path".into())
                })?;
                if !path.exists() {
                    return Err(Error::Config(format!(
                        "data path {} does not exist",
                        path.display()
                    )));
                }
            }
            DataSource::Generate => {}
        }
        Ok(())
    }
}

fn reclass_as_config(e: Error) -> Error {
    match e {
        Error::InvalidArgument(msg) => Error::Config(msg),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(
            "algorithm = \"sfvi\"\nmodel = \"conjugate\"\nseed = 7\n",
        )
        .unwrap();
        assert_eq!(cfg.algorithm, AlgorithmId::Sfvi);
        assert_eq!(cfg.model, ModelId::Conjugate);
        assert_eq!(cfg.sfvi.rounds, 1000);
        assert_eq!(cfg.data.silos, 2);
    }

    #[test]
    fn unknown_model_id_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str(
            "algorithm = \"sfvi\"\nmodel = \"prodlda\"\nseed = 7\n",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = ExperimentConfig::from_toml_str(
            "algorithm = \"sfvi\"\nmodel = \"conjugate\"\nseed = 7\ntypo_field = 1\n",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn csv_source_requires_existing_path() {
        let err = ExperimentConfig::from_toml_str(
            "algorithm = \"sfvi\"\nmodel = \"conjugate\"\nseed = 7\n[data]\nsource = \"csv\"\npath = \"/nonexistent/x.csv\"\n",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn bad_optimizer_is_a_config_error() {
        let err = ExperimentConfig::from_toml_str(
            "algorithm = \"sfvi\"\nmodel = \"conjugate\"\nseed = 7\n[optimizer]\nlr = -1.0\n",
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
