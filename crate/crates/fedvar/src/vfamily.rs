//! Structured Gaussian variational family.
//!
//! The global block is `Z_G = mu + sigma .* (L eps_G)` with `sigma =
//! exp(log_sigma)` and `L` unit lower-triangular, so the covariance is
//! `diag(sigma) L L^T diag(sigma)` and the log-determinant is `2 sum
//! log_sigma`. Each silo's local block conditions on the global draw:
//! `Z_L = mu_bar + C (Z_G - mu) + sigma_L .* (L_L eps_L)`.
//!
//! All gradients here are with respect to the sampling path only; the
//! variational parameters inside the log-densities are treated as constants.
//! That convention makes the single-sample gradient estimate exactly zero
//! when the approximation equals the posterior.
//!
//! Flat parameter layout (serialization, optimizer state, federation
//! messages):
//!
//! * global: `[mu | log_sigma | strict lower of L (row by row)]`
//! * local: `[mu_bar | log_sigma | strict lower of L | vec(C)]` where
//!   `vec` stacks columns.

use serde::{Deserialize, Serialize};

use crate::linalg::{
    self, dense_from_unitri, unit_lower_solve, unit_lower_transpose_solve, unitri_matvec,
    LowerUnitriangular, Mat,
};
use crate::{Error, Result};

const LN_2PI: f64 = 1.8378770664093453;

/// Default scale at initialization; a near-deterministic start keeps early
/// single-sample gradients tame.
pub const INIT_LOG_SIGMA: f64 = -std::f64::consts::LN_10; // ln(0.1)

fn block_ids(blocks: &[usize], dim: usize) -> Vec<usize> {
    debug_assert_eq!(blocks.iter().sum::<usize>(), dim);
    let mut ids = Vec::with_capacity(dim);
    for (b, &len) in blocks.iter().enumerate() {
        ids.extend(std::iter::repeat_n(b, len));
    }
    ids
}

/// Variational parameters of the global Gaussian block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GlobalVarParams {
    pub mu: Vec<f64>,
    pub log_sigma: Vec<f64>,
    pub l: LowerUnitriangular,
    /// Independence structure: entries of `l` that couple different blocks
    /// are frozen at zero. `None` means fully coupled; all-singleton blocks
    /// give a diagonal covariance.
    pub blocks: Option<Vec<usize>>,
}

impl GlobalVarParams {
    pub fn new(dim: usize) -> Self {
        GlobalVarParams {
            mu: vec![0.0; dim],
            log_sigma: vec![INIT_LOG_SIGMA; dim],
            l: LowerUnitriangular::identity(dim),
            blocks: None,
        }
    }

    pub fn new_diagonal(dim: usize) -> Self {
        GlobalVarParams {
            blocks: Some(vec![1; dim]),
            ..GlobalVarParams::new(dim)
        }
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn eta_len(&self) -> usize {
        let n = self.dim();
        2 * n + linalg::tri_len(n)
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|s| s.exp()).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.eta_len());
        flat.extend_from_slice(&self.mu);
        flat.extend_from_slice(&self.log_sigma);
        flat.extend_from_slice(self.l.strict_lower());
        flat
    }

    /// Rebuild parameter values from a flat vector, keeping this instance's
    /// structure metadata.
    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.eta_len() {
            return Err(Error::DimMismatch {
                context: "GlobalVarParams::from_flat_like",
                expected: self.eta_len(),
                got: flat.len(),
            });
        }
        let n = self.dim();
        Ok(GlobalVarParams {
            mu: flat[..n].to_vec(),
            log_sigma: flat[n..2 * n].to_vec(),
            l: LowerUnitriangular::from_strict_lower(flat[2 * n..].to_vec(), n)?,
            blocks: self.blocks.clone(),
        })
    }

    /// Zero the gradient entries of parameters frozen by the independence
    /// structure. Frozen coordinates start at zero and never move.
    pub fn mask_grad(&self, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.eta_len());
        if let Some(blocks) = &self.blocks {
            let n = self.dim();
            let ids = block_ids(blocks, n);
            for i in 1..n {
                for j in 0..i {
                    if ids[i] != ids[j] {
                        grad[2 * n + LowerUnitriangular::strict_index(i, j)] = 0.0;
                    }
                }
            }
        }
    }

    /// `Z_G = mu + sigma .* (L eps)`.
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "GlobalVarParams::sample",
                expected: self.dim(),
                got: eps.len(),
            });
        }
        let le = unitri_matvec(&self.l, eps)?;
        Ok(self
            .mu
            .iter()
            .zip(self.log_sigma.iter())
            .zip(le.iter())
            .map(|((m, s), e)| m + s.exp() * e)
            .collect())
    }

    /// Exact Gaussian log-density at `z`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        let w = self.whiten(z)?;
        let n = self.dim() as f64;
        let mut logdet_half = 0.0;
        for s in &self.log_sigma {
            logdet_half += s;
        }
        Ok(-0.5 * n * LN_2PI - logdet_half - 0.5 * linalg::dot(&w, &w))
    }

    /// `L^{-1} diag(sigma)^{-1} (z - mu)`.
    fn whiten(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "GlobalVarParams::log_density",
                expected: self.dim(),
                got: z.len(),
            });
        }
        let scaled: Vec<f64> = z
            .iter()
            .zip(self.mu.iter())
            .zip(self.log_sigma.iter())
            .map(|((zi, mi), si)| (zi - mi) / si.exp())
            .collect();
        unit_lower_solve(&self.l, &scaled)
    }

    /// Gradient of the log-density with respect to `z` (parameters held
    /// fixed).
    pub fn grad_log_density_z(&self, z: &[f64]) -> Result<Vec<f64>> {
        let w = self.whiten(z)?;
        let t = unit_lower_transpose_solve(&self.l, &w)?;
        Ok(t.iter()
            .zip(self.log_sigma.iter())
            .map(|(ti, si)| -ti / si.exp())
            .collect())
    }

    /// `(d sample / d eta)^T cotangent` in the flat layout.
    pub fn vjp_eta(&self, eps: &[f64], cotangent: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if eps.len() != n {
            return Err(Error::DimMismatch {
                context: "GlobalVarParams::vjp_eta eps",
                expected: n,
                got: eps.len(),
            });
        }
        if cotangent.len() != n {
            return Err(Error::DimMismatch {
                context: "GlobalVarParams::vjp_eta cotangent",
                expected: n,
                got: cotangent.len(),
            });
        }
        let le = unitri_matvec(&self.l, eps)?;
        let sigma = self.sigma();
        let mut grad = vec![0.0; self.eta_len()];
        for i in 0..n {
            grad[i] = cotangent[i];
            grad[n + i] = cotangent[i] * sigma[i] * le[i];
        }
        for i in 1..n {
            for j in 0..i {
                grad[2 * n + LowerUnitriangular::strict_index(i, j)] =
                    cotangent[i] * sigma[i] * eps[j];
            }
        }
        self.mask_grad(&mut grad);
        Ok(grad)
    }

    /// Dense covariance `diag(sigma) L L^T diag(sigma)`.
    pub fn cov(&self) -> Mat {
        let n = self.dim();
        let dense = dense_from_unitri(&self.l);
        let sigma = self.sigma();
        let mut cov = Mat::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..=i.min(j) {
                    s += dense.get(i, k) * dense.get(j, k);
                }
                cov.set(i, j, sigma[i] * s * sigma[j]);
            }
        }
        cov
    }

    /// Marginal variances, diagonal of `cov()`.
    pub fn variances(&self) -> Vec<f64> {
        let cov = self.cov();
        cov.diag()
    }

    /// Recover parameters from first and second moments. With `diagonal`
    /// set, off-diagonal covariance is ignored structurally and `L` stays
    /// the identity; otherwise the Cholesky factor is split into a scale
    /// vector and a unit lower-triangular factor.
    pub fn from_moments(mu: &[f64], cov: &Mat, diagonal: bool) -> Result<Self> {
        let n = mu.len();
        if cov.rows() != n || cov.cols() != n {
            return Err(Error::DimMismatch {
                context: "GlobalVarParams::from_moments",
                expected: n,
                got: cov.rows(),
            });
        }
        if diagonal {
            let mut log_sigma = Vec::with_capacity(n);
            for i in 0..n {
                let v = cov.get(i, i);
                if v <= 0.0 || v.is_nan() {
                    return Err(Error::NotPsd { min_eigenvalue: v });
                }
                log_sigma.push(0.5 * v.ln());
            }
            return Ok(GlobalVarParams {
                mu: mu.to_vec(),
                log_sigma,
                l: LowerUnitriangular::identity(n),
                blocks: Some(vec![1; n]),
            });
        }
        let chol = linalg::cholesky_lower(cov)?;
        let mut log_sigma = Vec::with_capacity(n);
        let mut l = LowerUnitriangular::identity(n);
        for i in 0..n {
            let d = chol.get(i, i);
            log_sigma.push(d.ln());
            for j in 0..i {
                l.set_strict(i, j, chol.get(i, j) / d);
            }
        }
        Ok(GlobalVarParams {
            mu: mu.to_vec(),
            log_sigma,
            l,
            blocks: None,
        })
    }
}

/// Variational parameters of one silo's conditional Gaussian block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalVarParams {
    pub mu_bar: Vec<f64>,
    /// Conditioning matrix, `n_local x n_global`.
    pub c: Mat,
    pub log_sigma: Vec<f64>,
    pub l: LowerUnitriangular,
    /// Independent sub-blocks of the local latent vector; entries of `l`
    /// coupling different blocks are frozen at zero. All-singleton blocks
    /// reduce `l` to the identity.
    pub blocks: Option<Vec<usize>>,
    /// When false, `c` is frozen at zero and the local block is
    /// unconditionally Gaussian (mean-field across the global/local split).
    pub train_c: bool,
}

impl LocalVarParams {
    pub fn new(n_local: usize, n_global: usize) -> Self {
        LocalVarParams {
            mu_bar: vec![0.0; n_local],
            c: Mat::zeros(n_local, n_global),
            log_sigma: vec![INIT_LOG_SIGMA; n_local],
            l: LowerUnitriangular::identity(n_local),
            blocks: None,
            train_c: true,
        }
    }

    pub fn with_blocks(mut self, blocks: Vec<usize>) -> Result<Self> {
        let total: usize = blocks.iter().sum();
        if total != self.dim() {
            return Err(Error::DimMismatch {
                context: "LocalVarParams::with_blocks",
                expected: self.dim(),
                got: total,
            });
        }
        self.blocks = Some(blocks);
        Ok(self)
    }

    pub fn mean_field(mut self) -> Self {
        let n = self.dim();
        self.blocks = Some(vec![1; n]);
        self.train_c = false;
        self
    }

    pub fn dim(&self) -> usize {
        self.mu_bar.len()
    }

    pub fn global_dim(&self) -> usize {
        self.c.cols()
    }

    pub fn eta_len(&self) -> usize {
        let m = self.dim();
        2 * m + linalg::tri_len(m) + m * self.global_dim()
    }

    pub fn sigma(&self) -> Vec<f64> {
        self.log_sigma.iter().map(|s| s.exp()).collect()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let m = self.dim();
        let n = self.global_dim();
        let mut flat = Vec::with_capacity(self.eta_len());
        flat.extend_from_slice(&self.mu_bar);
        flat.extend_from_slice(&self.log_sigma);
        flat.extend_from_slice(self.l.strict_lower());
        for j in 0..n {
            for i in 0..m {
                flat.push(self.c.get(i, j));
            }
        }
        flat
    }

    pub fn from_flat_like(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.eta_len() {
            return Err(Error::DimMismatch {
                context: "LocalVarParams::from_flat_like",
                expected: self.eta_len(),
                got: flat.len(),
            });
        }
        let m = self.dim();
        let n = self.global_dim();
        let tri = linalg::tri_len(m);
        let mut c = Mat::zeros(m, n);
        for j in 0..n {
            for i in 0..m {
                c.set(i, j, flat[2 * m + tri + j * m + i]);
            }
        }
        Ok(LocalVarParams {
            mu_bar: flat[..m].to_vec(),
            log_sigma: flat[m..2 * m].to_vec(),
            l: LowerUnitriangular::from_strict_lower(flat[2 * m..2 * m + tri].to_vec(), m)?,
            c,
            blocks: self.blocks.clone(),
            train_c: self.train_c,
        })
    }

    pub fn mask_grad(&self, grad: &mut [f64]) {
        debug_assert_eq!(grad.len(), self.eta_len());
        let m = self.dim();
        let n = self.global_dim();
        let tri = linalg::tri_len(m);
        if let Some(blocks) = &self.blocks {
            let ids = block_ids(blocks, m);
            for i in 1..m {
                for j in 0..i {
                    if ids[i] != ids[j] {
                        grad[2 * m + LowerUnitriangular::strict_index(i, j)] = 0.0;
                    }
                }
            }
        }
        if !self.train_c {
            for g in grad[2 * m + tri..2 * m + tri + m * n].iter_mut() {
                *g = 0.0;
            }
        }
    }

    /// Conditional mean `mu_bar + C (z_g - mu_g)`.
    pub fn conditional_mean(&self, mu_g: &[f64], z_g: &[f64]) -> Result<Vec<f64>> {
        if mu_g.len() != self.global_dim() || z_g.len() != self.global_dim() {
            return Err(Error::DimMismatch {
                context: "LocalVarParams::conditional_mean",
                expected: self.global_dim(),
                got: z_g.len(),
            });
        }
        let delta: Vec<f64> = z_g.iter().zip(mu_g.iter()).map(|(z, m)| z - m).collect();
        let shift = linalg::matvec(&self.c, &delta)?;
        Ok(self
            .mu_bar
            .iter()
            .zip(shift.iter())
            .map(|(m, s)| m + s)
            .collect())
    }

    /// `Z_L = mu_bar + C (z_g - mu_g) + sigma .* (L eps)`.
    pub fn sample(&self, mu_g: &[f64], z_g: &[f64], eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "LocalVarParams::sample",
                expected: self.dim(),
                got: eps.len(),
            });
        }
        let mean = self.conditional_mean(mu_g, z_g)?;
        let le = unitri_matvec(&self.l, eps)?;
        Ok(mean
            .iter()
            .zip(self.log_sigma.iter())
            .zip(le.iter())
            .map(|((m, s), e)| m + s.exp() * e)
            .collect())
    }

    /// Conditional Gaussian log-density of `z_l` given `z_g`.
    pub fn log_density(&self, mu_g: &[f64], z_g: &[f64], z_l: &[f64]) -> Result<f64> {
        let w = self.whiten(mu_g, z_g, z_l)?;
        let m = self.dim() as f64;
        let mut logdet_half = 0.0;
        for s in &self.log_sigma {
            logdet_half += s;
        }
        Ok(-0.5 * m * LN_2PI - logdet_half - 0.5 * linalg::dot(&w, &w))
    }

    fn whiten(&self, mu_g: &[f64], z_g: &[f64], z_l: &[f64]) -> Result<Vec<f64>> {
        if z_l.len() != self.dim() {
            return Err(Error::DimMismatch {
                context: "LocalVarParams::log_density",
                expected: self.dim(),
                got: z_l.len(),
            });
        }
        let mean = self.conditional_mean(mu_g, z_g)?;
        let scaled: Vec<f64> = z_l
            .iter()
            .zip(mean.iter())
            .zip(self.log_sigma.iter())
            .map(|((z, m), s)| (z - m) / s.exp())
            .collect();
        unit_lower_solve(&self.l, &scaled)
    }

    /// Gradients of the conditional log-density with respect to its two
    /// arguments, `(d/d z_g, d/d z_l)`, parameters held fixed. The `z_g`
    /// dependence enters through the conditional mean.
    pub fn grad_log_density_z(
        &self,
        mu_g: &[f64],
        z_g: &[f64],
        z_l: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let w = self.whiten(mu_g, z_g, z_l)?;
        let t = unit_lower_transpose_solve(&self.l, &w)?;
        let wrt_zl: Vec<f64> = t
            .iter()
            .zip(self.log_sigma.iter())
            .map(|(ti, si)| -ti / si.exp())
            .collect();
        // d/d z_g = -C^T (d/d z_l)
        let n = self.global_dim();
        let mut wrt_zg = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..self.dim() {
                s += self.c.get(i, j) * wrt_zl[i];
            }
            wrt_zg[j] = -s;
        }
        Ok((wrt_zg, wrt_zl))
    }

    /// Vector-Jacobian products of the local sampling map: the gradient
    /// with respect to this block's own parameters and the gradient with
    /// respect to the global parameters (the path through `Z_G` and the
    /// explicit `mu_g`, which cancel in the `mu` coordinates).
    pub fn vjp_eta(
        &self,
        global: &GlobalVarParams,
        eps_g: &[f64],
        eps_l: &[f64],
        cotangent: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let m = self.dim();
        let n = self.global_dim();
        if global.dim() != n {
            return Err(Error::DimMismatch {
                context: "LocalVarParams::vjp_eta global",
                expected: n,
                got: global.dim(),
            });
        }
        if eps_l.len() != m || cotangent.len() != m {
            return Err(Error::DimMismatch {
                context: "LocalVarParams::vjp_eta eps_l/cotangent",
                expected: m,
                got: eps_l.len().max(cotangent.len()),
            });
        }
        let sigma_l = self.sigma();
        let le_l = unitri_matvec(&self.l, eps_l)?;
        // z_g - mu_g as a function of the global parameters.
        let le_g = unitri_matvec(&global.l, eps_g)?;
        let sigma_g = global.sigma();
        let u: Vec<f64> = sigma_g
            .iter()
            .zip(le_g.iter())
            .map(|(s, e)| s * e)
            .collect();

        let tri = linalg::tri_len(m);
        let mut grad_local = vec![0.0; self.eta_len()];
        for i in 0..m {
            grad_local[i] = cotangent[i];
            grad_local[m + i] = cotangent[i] * sigma_l[i] * le_l[i];
        }
        for i in 1..m {
            for j in 0..i {
                grad_local[2 * m + LowerUnitriangular::strict_index(i, j)] =
                    cotangent[i] * sigma_l[i] * eps_l[j];
            }
        }
        for j in 0..n {
            for i in 0..m {
                grad_local[2 * m + tri + j * m + i] = cotangent[i] * u[j];
            }
        }
        self.mask_grad(&mut grad_local);

        // Pull the cotangent back through C, then through the global
        // sampling map. The mu block vanishes: mu_g cancels out of
        // C (Z_G - mu_g) under reparameterization.
        let mut w = vec![0.0; n];
        for j in 0..n {
            let mut s = 0.0;
            for i in 0..m {
                s += self.c.get(i, j) * cotangent[i];
            }
            w[j] = s;
        }
        let mut grad_global = vec![0.0; global.eta_len()];
        for i in 0..n {
            grad_global[n + i] = w[i] * sigma_g[i] * le_g[i];
        }
        for i in 1..n {
            for j in 0..i {
                grad_global[2 * n + LowerUnitriangular::strict_index(i, j)] =
                    w[i] * sigma_g[i] * eps_g[j];
            }
        }
        global.mask_grad(&mut grad_global);
        Ok((grad_local, grad_global))
    }

    /// Conditional covariance `diag(sigma) L L^T diag(sigma)`.
    pub fn cond_cov(&self) -> Mat {
        let m = self.dim();
        let dense = dense_from_unitri(&self.l);
        let sigma = self.sigma();
        let mut cov = Mat::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                let mut s = 0.0;
                for k in 0..=i.min(j) {
                    s += dense.get(i, k) * dense.get(j, k);
                }
                cov.set(i, j, sigma[i] * s * sigma[j]);
            }
        }
        cov
    }
}

/// One joint draw with the noise that produced it.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub z_g: Vec<f64>,
    pub z_l: Vec<f64>,
    pub eps_g: Vec<f64>,
    pub eps_l: Vec<f64>,
}

impl LatentSample {
    pub fn draw(
        global: &GlobalVarParams,
        local: &LocalVarParams,
        eps_g: Vec<f64>,
        eps_l: Vec<f64>,
    ) -> Result<Self> {
        let z_g = global.sample(&eps_g)?;
        let z_l = local.sample(&global.mu, &z_g, &eps_l)?;
        Ok(LatentSample {
            z_g,
            z_l,
            eps_g,
            eps_l,
        })
    }
}
