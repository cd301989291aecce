//! Hierarchical two-layer Bayesian network for heterogeneous silos.
//!
//! Every silo runs a personalized classifier whose first-layer weights share
//! a common Gaussian through a non-centered parameterization:
//!
//! ```text
//! mu_ij ~ N(0, 1)         sigma ~ half-N(0, 1)
//! eps^{(j)}_ij ~ N(0, 1)  per silo
//! W1^{(j)} = mu + sigma * eps^{(j)}
//! W2^{(j)}_ci ~ N(0, 1)   per silo
//! y | x ~ Cat(softmax(W2^{(j)} relu(W1^{(j)} x)))
//! ```
//!
//! Globals are `(vec(mu), log sigma)`; silo `j`'s locals are `(vec(eps^{(j)}),
//! vec(W2^{(j)}))`, one block per silo rather than per observation. The
//! half-normal scale is optimized on the log scale with the change-of-
//! variables correction folded into the prior.

use super::{
    log_sum_exp, LocalJointGrads, LocalLayout, Model, PriorGrads, SiloShard, VariationalStructure,
};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Clone, Debug)]
pub struct ToyHierBnnModel {
    pub n_features: usize,
    pub n_hidden: usize,
    pub n_classes: usize,
}

impl ToyHierBnnModel {
    pub fn new(n_features: usize, n_hidden: usize, n_classes: usize) -> Result<Self> {
        if !(1..=8).contains(&n_features)
            || !(1..=16).contains(&n_hidden)
            || !(2..=4).contains(&n_classes)
        {
            return Err(Error::InvalidArgument(format!(
                "toy network bounds: features in 1..=8, hidden in 1..=16, classes in 2..=4 \
                 (got {n_features}, {n_hidden}, {n_classes})"
            )));
        }
        Ok(ToyHierBnnModel {
            n_features,
            n_hidden,
            n_classes,
        })
    }

    fn w1_len(&self) -> usize {
        self.n_hidden * self.n_features
    }

    fn w2_len(&self) -> usize {
        self.n_classes * self.n_hidden
    }

    /// Forward pass for one observation. Returns (logits, relu input).
    fn forward(&self, w1: &[f64], w2: &[f64], x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let h = self.n_hidden;
        let d = self.n_features;
        let k = self.n_classes;
        let mut pre = Vec::with_capacity(h);
        for i in 0..h {
            let mut s = 0.0;
            for j in 0..d {
                s += w1[i * d + j] * x[j];
            }
            pre.push(s);
        }
        let act: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
        let mut logits = Vec::with_capacity(k);
        for c in 0..k {
            let mut s = 0.0;
            for i in 0..h {
                s += w2[c * h + i] * act[i];
            }
            logits.push(s);
        }
        (logits, pre)
    }

    fn first_layer(&self, z_g: &[f64], eps: &[f64]) -> Vec<f64> {
        let sigma = z_g[self.w1_len()].exp();
        (0..self.w1_len())
            .map(|i| z_g[i] + sigma * eps[i])
            .collect()
    }
}

impl Model for ToyHierBnnModel {
    fn id(&self) -> &'static str {
        "hierbnn"
    }

    fn n_theta(&self) -> usize {
        0
    }

    /// `[vec(mu) | log sigma]`.
    fn n_global(&self) -> usize {
        self.w1_len() + 1
    }

    /// `[vec(eps) | vec(W2)]`, one block per silo.
    fn local_layout(&self, _shard: &SiloShard) -> LocalLayout {
        LocalLayout::PerSilo {
            dim: self.w1_len() + self.w2_len(),
        }
    }

    fn log_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> f64 {
        let mut lp = 0.0;
        for &m in &z_g[..self.w1_len()] {
            lp += -0.5 * LN_2PI - 0.5 * m * m;
        }
        // Half-normal sigma on the log scale: log p(t) =
        // 0.5 ln(2/pi) - exp(2t)/2 + t.
        let t = z_g[self.w1_len()];
        lp += 0.5 * (2.0 / std::f64::consts::PI).ln() - 0.5 * (2.0 * t).exp() + t;
        lp
    }

    fn grad_prior_global(&self, _theta: &[f64], z_g: &[f64]) -> PriorGrads {
        let mut wrt_z_g: Vec<f64> = z_g[..self.w1_len()].iter().map(|m| -m).collect();
        let t = z_g[self.w1_len()];
        wrt_z_g.push(1.0 - (2.0 * t).exp());
        PriorGrads {
            wrt_theta: vec![],
            wrt_z_g,
        }
    }

    fn log_local_joint(&self, shard: &SiloShard, _theta: &[f64], z_g: &[f64], z_l: &[f64]) -> f64 {
        let w1n = self.w1_len();
        let (eps, w2) = z_l.split_at(w1n);
        let w1 = self.first_layer(z_g, eps);
        let mut total = 0.0;
        for &e in eps {
            total += -0.5 * LN_2PI - 0.5 * e * e;
        }
        for &w in w2 {
            total += -0.5 * LN_2PI - 0.5 * w * w;
        }
        for unit in &shard.units {
            for row in &unit.rows {
                let (logits, _) = self.forward(&w1, w2, &row.features);
                total += logits[row.label as usize] - log_sum_exp(&logits);
            }
        }
        total
    }

    fn grad_local_joint(
        &self,
        shard: &SiloShard,
        _theta: &[f64],
        z_g: &[f64],
        z_l: &[f64],
    ) -> LocalJointGrads {
        let h = self.n_hidden;
        let d = self.n_features;
        let k = self.n_classes;
        let w1n = self.w1_len();
        let (eps, w2) = z_l.split_at(w1n);
        let sigma = z_g[w1n].exp();
        let w1 = self.first_layer(z_g, eps);

        let mut g_w1 = vec![0.0; w1n];
        let mut g_w2: Vec<f64> = w2.iter().map(|w| -w).collect();
        for unit in &shard.units {
            for row in &unit.rows {
                let (logits, pre) = self.forward(&w1, w2, &row.features);
                let lse = log_sum_exp(&logits);
                let label = row.label as usize;
                let act: Vec<f64> = pre.iter().map(|p| p.max(0.0)).collect();
                let mut g_act = vec![0.0; h];
                for c in 0..k {
                    let delta = f64::from(c == label) - (logits[c] - lse).exp();
                    for i in 0..h {
                        g_w2[c * h + i] += delta * act[i];
                        g_act[i] += delta * w2[c * h + i];
                    }
                }
                for i in 0..h {
                    if pre[i] > 0.0 {
                        for j in 0..d {
                            g_w1[i * d + j] += g_act[i] * row.features[j];
                        }
                    }
                }
            }
        }

        // Chain through W1 = mu + sigma * eps.
        let mut wrt_z_g = Vec::with_capacity(self.n_global());
        wrt_z_g.extend_from_slice(&g_w1);
        let mut g_t = 0.0;
        for i in 0..w1n {
            g_t += g_w1[i] * sigma * eps[i];
        }
        wrt_z_g.push(g_t);

        let mut wrt_z_l = Vec::with_capacity(z_l.len());
        for i in 0..w1n {
            wrt_z_l.push(-eps[i] + sigma * g_w1[i]);
        }
        wrt_z_l.extend_from_slice(&g_w2);

        LocalJointGrads {
            wrt_theta: vec![],
            wrt_z_g,
            wrt_z_l,
        }
    }

    fn variational_structure(&self) -> VariationalStructure {
        // Fully mean-field approximation for the network weights.
        VariationalStructure {
            diagonal_global: true,
            unit_blocks: true,
            train_c: false,
        }
    }

    fn predict_proba(
        &self,
        _theta: &[f64],
        z_g: &[f64],
        z_l: &[f64],
        features: &[f64],
    ) -> Option<Vec<f64>> {
        let (eps, w2) = z_l.split_at(self.w1_len());
        let w1 = self.first_layer(z_g, eps);
        let (logits, _) = self.forward(&w1, w2, features);
        let lse = log_sum_exp(&logits);
        Some(logits.iter().map(|x| (x - lse).exp()).collect())
    }
}
