//! Softmax regression with learned prior scales.
//!
//! ```text
//! W_cj ~ N(0, sigma_W^2),  b_c ~ N(0, sigma_b^2)
//! y_k | W, b ~ Cat(softmax(W x_k + b))
//! ```
//!
//! The prior scales are trainable on the log scale: `theta = (log sigma_W^2,
//! log sigma_b^2)`. There are no local latents; all of the information a
//! silo contributes flows through the global gradient. The likelihood does
//! not involve `theta`, so the hyperparameter gradient lives entirely in the
//! prior term.

use super::{
    log_sum_exp, LocalJointGrads, LocalLayout, Model, PriorGrads, SiloShard, VariationalStructure,
};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug)]
pub struct MultinomRegModel {
    pub n_features: usize,
    pub n_classes: usize,
}

impl MultinomRegModel {
    pub fn new(n_features: usize, n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {n_classes}"
            )));
        }
        if n_features == 0 {
            return Err(Error::InvalidArgument("need at least 1 feature".into()));
        }
        Ok(MultinomRegModel {
            n_features,
            n_classes,
        })
    }

    pub fn validate_shard(&self, shard: &SiloShard) -> Result<()> {
        for unit in &shard.units {
            for row in &unit.rows {
                if row.features.len() != self.n_features {
                    return Err(Error::InvalidArgument(format!(
                        "expected {} features, got {}",
                        self.n_features,
                        row.features.len()
                    )));
                }
                let label = row.label;
                if label.fract() != 0.0 || label < 0.0 || label >= self.n_classes as f64 {
                    return Err(Error::InvalidArgument(format!(
                        "label out of range: {label} with {} classes",
                        self.n_classes
                    )));
                }
            }
        }
        Ok(())
    }

    /// z_g layout: `[vec(W) row-major (classes x features) | b]`.
    fn logits(&self, z_g: &[f64], x: &[f64]) -> Vec<f64> {
        let k = self.n_classes;
        let d = self.n_features;
        let mut a = Vec::with_capacity(k);
        for c in 0..k {
            let mut s = 0.0;
            for j in 0..d {
                s += z_g[c * d + j] * x[j];
            }
            s += z_g[k * d + c];
            a.push(s);
        }
        a
    }
}

impl Model for MultinomRegModel {
    fn id(&self) -> &'static str {
        "multinom"
    }

    fn n_theta(&self) -> usize {
        2
    }

    fn n_global(&self) -> usize {
        self.n_classes * self.n_features + self.n_classes
    }

    fn local_layout(&self, _shard: &SiloShard) -> LocalLayout {
        LocalLayout::PerSilo { dim: 0 }
    }

    fn log_prior_global(&self, theta: &[f64], z_g: &[f64]) -> f64 {
        let (t_w, t_b) = (theta[0], theta[1]);
        let kd = self.n_classes * self.n_features;
        let mut lp = 0.0;
        for &w in &z_g[..kd] {
            lp += -0.5 * LN_2PI - 0.5 * t_w - 0.5 * w * w * (-t_w).exp();
        }
        for &b in &z_g[kd..] {
            lp += -0.5 * LN_2PI - 0.5 * t_b - 0.5 * b * b * (-t_b).exp();
        }
        lp
    }

    fn grad_prior_global(&self, theta: &[f64], z_g: &[f64]) -> PriorGrads {
        let (t_w, t_b) = (theta[0], theta[1]);
        let kd = self.n_classes * self.n_features;
        let inv_w = (-t_w).exp();
        let inv_b = (-t_b).exp();
        let mut wrt_z_g = Vec::with_capacity(z_g.len());
        let mut g_tw = 0.0;
        let mut g_tb = 0.0;
        for &w in &z_g[..kd] {
            wrt_z_g.push(-w * inv_w);
            g_tw += -0.5 + 0.5 * w * w * inv_w;
        }
        for &b in &z_g[kd..] {
            wrt_z_g.push(-b * inv_b);
            g_tb += -0.5 + 0.5 * b * b * inv_b;
        }
        PriorGrads {
            wrt_theta: vec![g_tw, g_tb],
            wrt_z_g,
        }
    }

    fn log_local_joint(&self, shard: &SiloShard, _theta: &[f64], z_g: &[f64], z_l: &[f64]) -> f64 {
        debug_assert!(z_l.is_empty());
        let mut ll = 0.0;
        for unit in &shard.units {
            for row in &unit.rows {
                let a = self.logits(z_g, &row.features);
                ll += a[row.label as usize] - log_sum_exp(&a);
            }
        }
        ll
    }

    fn grad_local_joint(
        &self,
        shard: &SiloShard,
        _theta: &[f64],
        z_g: &[f64],
        _z_l: &[f64],
    ) -> LocalJointGrads {
        let k = self.n_classes;
        let d = self.n_features;
        let mut g = vec![0.0; self.n_global()];
        for unit in &shard.units {
            for row in &unit.rows {
                let a = self.logits(z_g, &row.features);
                let lse = log_sum_exp(&a);
                let label = row.label as usize;
                for c in 0..k {
                    let delta = f64::from(c == label) - (a[c] - lse).exp();
                    for j in 0..d {
                        g[c * d + j] += delta * row.features[j];
                    }
                    g[k * d + c] += delta;
                }
            }
        }
        LocalJointGrads {
            wrt_theta: vec![0.0, 0.0],
            wrt_z_g: g,
            wrt_z_l: vec![],
        }
    }

    fn variational_structure(&self) -> VariationalStructure {
        // Independence approximation over the global weights keeps the
        // barycenter analytic.
        VariationalStructure {
            diagonal_global: true,
            unit_blocks: true,
            train_c: true,
        }
    }

    fn predict_proba(
        &self,
        _theta: &[f64],
        z_g: &[f64],
        _z_l: &[f64],
        features: &[f64],
    ) -> Option<Vec<f64>> {
        let a = self.logits(z_g, features);
        let lse = log_sum_exp(&a);
        Some(a.iter().map(|x| (x - lse).exp()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::fd_gradient_oracle;
    use crate::models::{Dataset, Row, Unit};
    use crate::rng::RngKey;

    fn dataset(n: usize, d: usize, k: usize, seed: u64) -> Dataset {
        let key = RngKey::new(seed);
        let feats = key.derive(0).std_normal(n * d);
        let units = (0..n)
            .map(|i| Unit {
                global_index: i as u64,
                rows: vec![Row {
                    features: feats[i * d..(i + 1) * d].to_vec(),
                    label: (key.derive(1).uniform_at(i as u64) * k as f64)
                        .floor()
                        .min(k as f64 - 1.0),
                }],
            })
            .collect();
        Dataset::partition_contiguous(units, 2).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_likelihood() {
        let m = MultinomRegModel::new(3, 4).unwrap();
        let ds = dataset(6, 3, 4, 1);
        let z_g = vec![0.0; m.n_global()];
        for shard in &ds.shards {
            let ll = m.log_local_joint(shard, &[0.0, 0.0], &z_g, &[]);
            let want = -(shard.n_rows() as f64) * (4.0_f64).ln();
            assert!((ll - want).abs() < 1e-12);
        }
    }

    #[test]
    fn theta_gradient_matches_fd() {
        let m = MultinomRegModel::new(2, 3).unwrap();
        let key = RngKey::new(3);
        let z_g = key.derive(0).std_normal(m.n_global());
        let theta = vec![0.4, -0.6];
        let grads = m.grad_prior_global(&theta, &z_g);
        let fd = fd_gradient_oracle(|t| m.log_prior_global(t, &z_g), &theta, 1e-5);
        for (a, b) in grads.wrt_theta.iter().zip(fd.iter()) {
            let scale = a.abs().max(b.abs()).max(1.0);
            assert!((a - b).abs() / scale < 1e-5, "{a} vs {b}");
        }
        let fd_z = fd_gradient_oracle(|z| m.log_prior_global(&theta, z), &z_g, 1e-5);
        for (a, b) in grads.wrt_z_g.iter().zip(fd_z.iter()) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn likelihood_gradient_matches_fd() {
        let m = MultinomRegModel::new(2, 3).unwrap();
        let ds = dataset(8, 2, 3, 9);
        let shard = &ds.shards[0];
        let z_g = RngKey::new(4).std_normal(m.n_global());
        let grads = m.grad_local_joint(shard, &[0.0, 0.0], &z_g, &[]);
        let fd = fd_gradient_oracle(
            |z| m.log_local_joint(shard, &[0.0, 0.0], z, &[]),
            &z_g,
            1e-5,
        );
        for (a, b) in grads.wrt_z_g.iter().zip(fd.iter()) {
            let scale = a.abs().max(b.abs()).max(1.0);
            assert!((a - b).abs() / scale < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn flat_prior_limit_kills_weight_gradient() {
        let m = MultinomRegModel::new(2, 3).unwrap();
        let z_g = RngKey::new(5).std_normal(m.n_global());
        let theta = vec![(1e6_f64).ln(), (1e6_f64).ln()];
        let grads = m.grad_prior_global(&theta, &z_g);
        for g in grads.wrt_z_g {
            assert!(g.abs() < 1e-5);
        }
    }

    #[test]
    fn rejects_out_of_range_labels() {
        let m = MultinomRegModel::new(2, 3).unwrap();
        let mut ds = dataset(4, 2, 3, 6);
        ds.shards[0].units[0].rows[0].label = 3.0;
        assert!(m.validate_shard(&ds.shards[0]).is_err());
    }

    #[test]
    fn likelihood_is_partition_invariant() {
        let m = MultinomRegModel::new(2, 3).unwrap();
        let key = RngKey::new(11);
        let feats = key.derive(0).std_normal(12 * 2);
        let units: Vec<Unit> = (0..12)
            .map(|i| Unit {
                global_index: i as u64,
                rows: vec![Row {
                    features: feats[i * 2..(i + 1) * 2].to_vec(),
                    label: (i % 3) as f64,
                }],
            })
            .collect();
        let z_g = key.derive(1).std_normal(m.n_global());
        let mut totals = Vec::new();
        for j in [1, 2, 4] {
            let ds = Dataset::partition_contiguous(units.clone(), j).unwrap();
            let mut total = 0.0;
            for shard in &ds.shards {
                total += m.log_local_joint(shard, &[0.0, 0.0], &z_g, &[]);
            }
            totals.push(total);
        }
        for t in &totals[1..] {
            assert!((t - totals[0]).abs() < 1e-10);
        }
    }
}
