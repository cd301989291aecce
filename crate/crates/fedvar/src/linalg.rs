//! Dense linear algebra for the variational family and barycenter
//! computations.
//!
//! Matrices are row-major and every reduction runs left to right in index
//! order. Partition-invariance tests compare per-silo quantities bitwise, so
//! the summation order is part of the contract here, not an implementation
//! detail.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    data: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            data: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::DimMismatch {
                    context: "Mat::from_rows",
                    expected: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Mat {
            data,
            rows: r,
            cols: c,
        })
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Mat::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.set(i, i, d);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self.get(i, i))
            .collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn mul(&self, other: &Mat) -> Result<Mat> {
        if self.cols != other.rows {
            return Err(Error::DimMismatch {
                context: "Mat::mul",
                expected: self.cols,
                got: other.rows,
            });
        }
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for j in 0..other.cols {
                let mut s = 0.0;
                for k in 0..self.cols {
                    s += self.get(i, k) * other.get(k, j);
                }
                out.set(i, j, s);
            }
        }
        Ok(out)
    }

    pub fn add(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                context: "Mat::add",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(out)
    }

    pub fn sub(&self, other: &Mat) -> Result<Mat> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::DimMismatch {
                context: "Mat::sub",
                expected: self.rows * self.cols,
                got: other.rows * other.cols,
            });
        }
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(other.data.iter()) {
            *a -= b;
        }
        Ok(out)
    }

    pub fn scale(&self, s: f64) -> Mat {
        let mut out = self.clone();
        for a in out.data.iter_mut() {
            *a *= s;
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        let mut s = 0.0;
        for a in &self.data {
            s += a * a;
        }
        s.sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
    }

    pub fn max_asymmetry(&self) -> f64 {
        let mut m = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                m = m.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        m
    }

    /// (M + M^T) / 2, used to keep iterates symmetric under rounding.
    pub fn symmetrize(&self) -> Mat {
        let mut out = self.clone();
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(i, j, 0.5 * (self.get(i, j) + self.get(j, i)));
            }
        }
        out
    }
}

/// Number of entries strictly below the diagonal of an `n x n` matrix.
#[inline]
pub fn tri_len(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Lower-triangular matrix with an implied unit diagonal. Only the entries
/// strictly below the diagonal are stored, row by row: (1,0), (2,0), (2,1),
/// (3,0), ...
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerUnitriangular {
    strict_lower: Vec<f64>,
    dim: usize,
}

impl LowerUnitriangular {
    /// Identity factor (all strict entries zero).
    pub fn identity(dim: usize) -> Self {
        LowerUnitriangular {
            strict_lower: vec![0.0; tri_len(dim)],
            dim,
        }
    }

    pub fn from_strict_lower(strict_lower: Vec<f64>, dim: usize) -> Result<Self> {
        let expected = tri_len(dim);
        if strict_lower.len() != expected {
            return Err(Error::DimMismatch {
                context: "LowerUnitriangular::from_strict_lower",
                expected,
                got: strict_lower.len(),
            });
        }
        Ok(LowerUnitriangular { strict_lower, dim })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn strict_lower(&self) -> &[f64] {
        &self.strict_lower
    }

    pub fn strict_lower_mut(&mut self) -> &mut [f64] {
        &mut self.strict_lower
    }

    /// Storage offset of entry (i, j), i > j.
    #[inline]
    pub fn strict_index(i: usize, j: usize) -> usize {
        debug_assert!(i > j);
        i * (i - 1) / 2 + j
    }

    /// Offset of the first stored entry in row `i`.
    #[inline]
    pub fn row_start(i: usize) -> usize {
        i * i.saturating_sub(1) / 2
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i == j {
            1.0
        } else if i > j {
            self.strict_lower[Self::strict_index(i, j)]
        } else {
            0.0
        }
    }

    #[inline]
    pub fn set_strict(&mut self, i: usize, j: usize, v: f64) {
        self.strict_lower[Self::strict_index(i, j)] = v;
    }
}

/// Standard matrix-vector product. Row dot products accumulate left to
/// right.
pub fn matvec(m: &Mat, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(Error::DimMismatch {
            context: "matvec",
            expected: m.cols,
            got: v.len(),
        });
    }
    let mut out = Vec::with_capacity(m.rows);
    for i in 0..m.rows {
        let row = m.row(i);
        let mut s = 0.0;
        for j in 0..m.cols {
            s += row[j] * v[j];
        }
        out.push(s);
    }
    Ok(out)
}

/// `l * v` for a unit lower-triangular factor. Matches the summation order
/// of `matvec` on the dense expansion: for row i the strict entries
/// accumulate in ascending column order, then the unit diagonal adds `v[i]`.
pub fn unitri_matvec(l: &LowerUnitriangular, v: &[f64]) -> Result<Vec<f64>> {
    if l.dim != v.len() {
        return Err(Error::DimMismatch {
            context: "unitri_matvec",
            expected: l.dim,
            got: v.len(),
        });
    }
    let mut out = Vec::with_capacity(l.dim);
    for i in 0..l.dim {
        let base = LowerUnitriangular::row_start(i);
        let mut s = 0.0;
        for j in 0..i {
            s += l.strict_lower[base + j] * v[j];
        }
        s += v[i];
        out.push(s);
    }
    Ok(out)
}

/// Dense expansion of a unit lower-triangular factor.
pub fn dense_from_unitri(l: &LowerUnitriangular) -> Mat {
    let n = l.dim;
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..i {
            m.set(i, j, l.get(i, j));
        }
        m.set(i, i, 1.0);
    }
    m
}

/// Solve `l * x = b` by forward substitution (unit diagonal).
pub fn unit_lower_solve(l: &LowerUnitriangular, b: &[f64]) -> Result<Vec<f64>> {
    if l.dim != b.len() {
        return Err(Error::DimMismatch {
            context: "unit_lower_solve",
            expected: l.dim,
            got: b.len(),
        });
    }
    let mut x = vec![0.0; l.dim];
    for i in 0..l.dim {
        let base = LowerUnitriangular::row_start(i);
        let mut s = b[i];
        for j in 0..i {
            s -= l.strict_lower[base + j] * x[j];
        }
        x[i] = s;
    }
    Ok(x)
}

/// Solve `l^T * x = b` by back substitution (unit diagonal).
pub fn unit_lower_transpose_solve(l: &LowerUnitriangular, b: &[f64]) -> Result<Vec<f64>> {
    if l.dim != b.len() {
        return Err(Error::DimMismatch {
            context: "unit_lower_transpose_solve",
            expected: l.dim,
            got: b.len(),
        });
    }
    let n = l.dim;
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l.strict_lower[LowerUnitriangular::strict_index(k, i)] * x[k];
        }
        x[i] = s;
    }
    Ok(x)
}

fn check_square_symmetric(m: &Mat, context: &'static str) -> Result<()> {
    if m.rows != m.cols {
        return Err(Error::DimMismatch {
            context,
            expected: m.rows,
            got: m.cols,
        });
    }
    let tol = 1e-10 * m.max_abs().max(1.0);
    let asym = m.max_asymmetry();
    if asym > tol {
        return Err(Error::NotSymmetric {
            max_asymmetry: asym,
        });
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns (eigenvalues, eigenvectors as columns), unordered.
pub fn symmetric_eigen(m: &Mat) -> Result<(Vec<f64>, Mat)> {
    check_square_symmetric(m, "symmetric_eigen")?;
    let n = m.rows;
    let mut a = m.symmetrize();
    let mut v = Mat::identity(n);
    if n <= 1 {
        return Ok((a.diag(), v));
    }
    let scale = a.max_abs().max(1.0);
    let tol = 1e-15 * scale;
    let max_sweeps = 64;
    for sweep in 0..max_sweeps {
        let mut off = 0.0_f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off = off.max(a.get(p, q).abs());
            }
        }
        if off <= tol {
            return Ok((a.diag(), v));
        }
        // Avoid rotating on entries far below the sweep threshold early on.
        let thresh = if sweep < 3 { off * 0.1 } else { 0.0 };
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a.get(p, q);
                if apq.abs() <= thresh || apq == 0.0 {
                    continue;
                }
                let app = a.get(p, p);
                let aqq = a.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut off = 0.0_f64;
    for p in 0..n {
        for q in (p + 1)..n {
            off = off.max(a.get(p, q).abs());
        }
    }
    Err(Error::NonConvergence {
        context: "symmetric_eigen",
        iterations: max_sweeps,
        residual: off,
    })
}

const PSD_EIG_CLAMP: f64 = 1e-10;

/// Symmetric PSD square root via eigendecomposition. Eigenvalues in
/// `[-1e-10, 0)` are clamped to zero; anything lower is an error.
pub fn sqrtm_psd(m: &Mat) -> Result<Mat> {
    check_square_symmetric(m, "sqrtm_psd")?;
    let (vals, vecs) = symmetric_eigen(m)?;
    sym_power_from_eigen(&vals, &vecs, 0.5, false)
}

/// Both `m^{1/2}` and `m^{-1/2}` from one eigendecomposition. The inverse
/// side requires strictly positive eigenvalues.
pub fn sqrtm_psd_with_inverse(m: &Mat) -> Result<(Mat, Mat)> {
    check_square_symmetric(m, "sqrtm_psd_with_inverse")?;
    let (vals, vecs) = symmetric_eigen(m)?;
    let root = sym_power_from_eigen(&vals, &vecs, 0.5, false)?;
    let inv_root = sym_power_from_eigen(&vals, &vecs, -0.5, true)?;
    Ok((root, inv_root))
}

fn sym_power_from_eigen(vals: &[f64], vecs: &Mat, power: f64, need_pd: bool) -> Result<Mat> {
    let n = vals.len();
    let mut powered = Vec::with_capacity(n);
    for &lam in vals {
        let lam = if lam < 0.0 {
            if lam < -PSD_EIG_CLAMP {
                return Err(Error::NotPsd {
                    min_eigenvalue: lam,
                });
            }
            0.0
        } else {
            lam
        };
        if need_pd && lam <= PSD_EIG_CLAMP {
            return Err(Error::NotPsd {
                min_eigenvalue: lam,
            });
        }
        powered.push(lam.powf(power));
    }
    // Q diag(f(lambda)) Q^T, symmetrized against rounding.
    let mut out = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..n {
                s += vecs.get(i, k) * powered[k] * vecs.get(j, k);
            }
            out.set(i, j, s);
        }
    }
    Ok(out.symmetrize())
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky_lower(m: &Mat) -> Result<Mat> {
    check_square_symmetric(m, "cholesky_lower")?;
    let n = m.rows;
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = m.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if s <= 0.0 {
                    return Err(Error::NotPsd { min_eigenvalue: s });
                }
                l.set(i, j, s.sqrt());
            } else {
                l.set(i, j, s / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Dot product, left to right.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|x| x.is_finite())
}
