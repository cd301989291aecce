//! Deterministic synthetic data generators.
//!
//! Generators draw through [`RngKey`] paths only, so a dataset is a pure
//! function of the key and the shape arguments.

use super::{Dataset, Row, SiloShard, Unit};
use crate::rng::RngKey;
use crate::{Error, Result};

/// Observations from the conjugate Gaussian hierarchy: one draw of the
/// global effect, then one local effect and one noisy observation per unit.
pub fn gen_conjugate_units(key: &RngKey, n: usize, tau: f64, lambda: f64, s: f64) -> Vec<Unit> {
    let z_g = tau * key.derive(0).std_normal(1)[0];
    let locals = key.derive(1).std_normal(n);
    let noise = key.derive(2).std_normal(n);
    (0..n)
        .map(|i| {
            let z_l = z_g + lambda * locals[i];
            Unit {
                global_index: i as u64,
                rows: vec![Row {
                    features: vec![],
                    label: z_l + s * noise[i],
                }],
            }
        })
        .collect()
}

/// Longitudinal binary-response subjects: a smoking indicator per subject,
/// centered ages over `visits` waves, labels drawn from the logistic mixed
/// model at fixed ground-truth coefficients.
pub fn gen_glmm_units(key: &RngKey, n_subjects: usize, visits: usize) -> Vec<Unit> {
    const BETA: [f64; 4] = [-1.0, 0.4, -0.15, 0.1];
    const B_SD: f64 = 1.0;
    let b_draws = key.derive(0).std_normal(n_subjects);
    (0..n_subjects)
        .map(|i| {
            let subject_key = key.derive(1).derive(i as u64);
            let smoke = f64::from(subject_key.uniform_at(0) < 0.4);
            let b = B_SD * b_draws[i];
            let rows = (0..visits)
                .map(|v| {
                    let age = v as f64 - (visits as f64 - 1.0) / 2.0;
                    let a = BETA[0] + BETA[1] * smoke + BETA[2] * age + BETA[3] * smoke * age + b;
                    let p = 1.0 / (1.0 + (-a).exp());
                    Row {
                        features: vec![smoke, age],
                        label: f64::from(subject_key.uniform_at(1 + v as u64) < p),
                    }
                })
                .collect();
            Unit {
                global_index: i as u64,
                rows,
            }
        })
        .collect()
}

/// Class means on a fixed circle so that independently keyed train and test
/// splits share the same geometry.
fn class_mean(class: usize, n_classes: usize, n_features: usize) -> Vec<f64> {
    const RADIUS: f64 = 3.0;
    let angle = 2.0 * std::f64::consts::PI * class as f64 / n_classes as f64;
    let mut mean = vec![0.0; n_features];
    mean[0] = RADIUS * angle.cos();
    if n_features > 1 {
        mean[1] = RADIUS * angle.sin();
    }
    mean
}

/// Gaussian-blob classification data with label skew: silo `j` draws a
/// `skew` fraction of its observations from class `j mod K` and spreads the
/// rest uniformly over the remaining classes.
pub fn gen_heterogeneous_classification(
    key: &RngKey,
    j_silos: usize,
    n_per_silo: usize,
    n_features: usize,
    n_classes: usize,
    skew: f64,
) -> Result<Dataset> {
    if j_silos == 0 || n_per_silo == 0 {
        return Err(Error::InvalidArgument(
            "need at least one silo and one observation".into(),
        ));
    }
    if n_classes < 2 || n_features == 0 {
        return Err(Error::InvalidArgument(
            "need K >= 2 classes and d >= 1 features".into(),
        ));
    }
    let uniform = 1.0 / n_classes as f64;
    if skew < uniform || skew > 1.0 || skew.is_nan() {
        return Err(Error::InvalidArgument(format!(
            "skew must lie in [1/K, 1] = [{uniform}, 1], got {skew}"
        )));
    }
    const NOISE_SD: f64 = 0.8;
    let mut shards = Vec::with_capacity(j_silos);
    let mut global_index = 0_u64;
    for j in 0..j_silos {
        let dominant = j % n_classes;
        let silo_key = key.derive(j as u64);
        let label_u = silo_key.derive(0).uniform(n_per_silo);
        let spread_u = silo_key.derive(1).uniform(n_per_silo);
        let noise = silo_key.derive(2).std_normal(n_per_silo * n_features);
        let mut units = Vec::with_capacity(n_per_silo);
        for i in 0..n_per_silo {
            let label = if label_u[i] < skew {
                dominant
            } else {
                // Uniform over the K-1 non-dominant classes.
                let pick = (spread_u[i] * (n_classes - 1) as f64) as usize;
                let pick = pick.min(n_classes - 2);
                if pick >= dominant {
                    pick + 1
                } else {
                    pick
                }
            };
            let mean = class_mean(label, n_classes, n_features);
            let features: Vec<f64> = (0..n_features)
                .map(|f| mean[f] + NOISE_SD * noise[i * n_features + f])
                .collect();
            units.push(Unit {
                global_index,
                rows: vec![Row {
                    features,
                    label: label as f64,
                }],
            });
            global_index += 1;
        }
        shards.push(SiloShard { silo_id: j, units });
    }
    Ok(Dataset { shards })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_are_deterministic() {
        let key = RngKey::new(8).derive(1);
        let a = gen_heterogeneous_classification(&key, 3, 50, 2, 4, 0.9).unwrap();
        let b = gen_heterogeneous_classification(&key, 3, 50, 2, 4, 0.9).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            gen_conjugate_units(&key, 20, 1.0, 1.0, 1.0),
            gen_conjugate_units(&key, 20, 1.0, 1.0, 1.0)
        );
    }

    #[test]
    fn skew_fraction_is_respected() {
        let key = RngKey::new(9);
        let ds = gen_heterogeneous_classification(&key, 4, 500, 2, 4, 0.9).unwrap();
        for (j, shard) in ds.shards.iter().enumerate() {
            let dominant = j % 4;
            let frac = shard
                .units
                .iter()
                .filter(|u| u.rows[0].label as usize == dominant)
                .count() as f64
                / shard.units.len() as f64;
            assert!(
                (frac - 0.9).abs() < 0.05,
                "silo {j} dominant fraction {frac}"
            );
        }
        ds.validate().unwrap();
    }

    #[test]
    fn no_skew_is_roughly_uniform() {
        let key = RngKey::new(10);
        let ds = gen_heterogeneous_classification(&key, 2, 1000, 2, 4, 0.25).unwrap();
        for shard in &ds.shards {
            for class in 0..4 {
                let frac = shard
                    .units
                    .iter()
                    .filter(|u| u.rows[0].label as usize == class)
                    .count() as f64
                    / shard.units.len() as f64;
                assert!((frac - 0.25).abs() < 0.06, "class {class} fraction {frac}");
            }
        }
    }

    #[test]
    fn infeasible_skew_is_rejected() {
        let key = RngKey::new(11);
        assert!(gen_heterogeneous_classification(&key, 2, 10, 2, 4, 0.1).is_err());
        assert!(gen_heterogeneous_classification(&key, 2, 10, 2, 4, 1.1).is_err());
    }

    #[test]
    fn glmm_units_have_expected_schema() {
        let units = gen_glmm_units(&RngKey::new(12), 537, 4);
        assert_eq!(units.len(), 537);
        for unit in &units {
            assert_eq!(unit.rows.len(), 4);
            for row in &unit.rows {
                assert!(row.features[0] == 0.0 || row.features[0] == 1.0);
                assert!(row.label == 0.0 || row.label == 1.0);
            }
            // Centered ages.
            let ages: f64 = unit.rows.iter().map(|r| r.features[1]).sum();
            assert!(ages.abs() < 1e-12);
        }
    }
}
