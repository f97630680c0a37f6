//! Small dense linear algebra, cascaded mean filters and distribution
//! quantiles used throughout the estimation engine.
//!
//! Parameter dimensions here are tiny (d <= ~25), so everything is written
//! for robustness rather than speed: Cholesky with explicit pivot checks,
//! eigendecomposition by cyclic Jacobi rotations, quantiles by rational
//! approximation refined with Newton steps on series-evaluated CDFs.

mod filter;
mod quantile;

pub use filter::CascadedFilterState;
pub use quantile::{chisq_cdf, chisq_quantile, normal_cdf, normal_quantile};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Symmetric matrix stored densely in row-major order.
///
/// Symmetry is enforced on write: `set` mirrors the entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim);
        for i in 0..dim {
            m.data[i * dim + i] = 1.0;
        }
        m
    }

    pub fn diag(entries: &[f64]) -> Self {
        let mut m = Self::zeros(entries.len());
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * entries.len() + i] = v;
        }
        m
    }

    /// Builds from row-major data, mirroring the lower triangle onto the
    /// upper to remove any asymmetry in the input.
    pub fn from_rows(dim: usize, rows: &[f64]) -> Result<Self> {
        if rows.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                got: rows.len(),
            });
        }
        let mut m = SymMatrix {
            dim,
            data: rows.to_vec(),
        };
        for i in 0..dim {
            for j in 0..i {
                let v = 0.5 * (m.data[i * dim + j] + m.data[j * dim + i]);
                m.data[i * dim + j] = v;
                m.data[j * dim + i] = v;
            }
        }
        Ok(m)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.dim + j] = v;
        self.data[j * self.dim + i] = v;
    }

    /// Adds `v * x xᵀ` in place.
    pub fn add_scaled_outer(&mut self, x: &[f64], v: f64) {
        debug_assert_eq!(x.len(), self.dim);
        for i in 0..self.dim {
            let xi = v * x[i];
            for j in 0..self.dim {
                self.data[i * self.dim + j] += xi * x[j];
            }
        }
    }

    pub fn scale(&mut self, v: f64) {
        for e in &mut self.data {
            *e *= v;
        }
    }

    pub fn add(&mut self, other: &SymMatrix) {
        debug_assert_eq!(self.dim, other.dim);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += *b;
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |acc, v| acc.max(v.abs()))
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for i in 0..self.dim {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// Quadratic form xᵀ A x.
    pub fn quad_form(&self, x: &[f64]) -> f64 {
        self.mul_vec(x).iter().zip(x).map(|(a, b)| a * b).sum()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Lower-triangular Cholesky factor.
#[derive(Debug, Clone)]
pub struct CholeskyFactor {
    dim: usize,
    // Row-major lower triangle, full dim*dim storage with zero upper part.
    lower: Vec<f64>,
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// Solves A x = b via forward/back substitution on L Lᵀ.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        if b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: b.len(),
            });
        }
        let mut y = b.to_vec();
        for i in 0..n {
            for j in 0..i {
                y[i] -= self.get(i, j) * y[j];
            }
            y[i] /= self.get(i, i);
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                y[i] -= self.get(j, i) * y[j];
            }
            y[i] /= self.get(i, i);
        }
        Ok(y)
    }

    /// log det A = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        (0..self.dim).map(|i| 2.0 * self.get(i, i).ln()).sum()
    }
}

/// Cholesky factorization A = L Lᵀ with strictly positive diagonal.
///
/// A non-positive pivot reports `NotPositiveDefinite` so the caller can
/// engage its jitter policy.
pub fn cholesky(a: &SymMatrix) -> Result<CholeskyFactor> {
    let n = a.dim();
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                }
                l[i * n + j] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(CholeskyFactor { dim: n, lower: l })
}

/// Solves A x = b for symmetric positive definite A.
pub fn spd_solve(a: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    cholesky(a)?.solve(b)
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as rows of the returned matrix.
pub fn sym_eigen(a: &SymMatrix) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    const MAX_SWEEPS: usize = 100;
    let n = a.dim();
    let mut m = a.data.clone();
    // v holds eigenvectors as columns during the iteration.
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let idx = |i: usize, j: usize| i * n + j;

    for _ in 0..MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[idx(p, q)] * m[idx(p, q)];
            }
        }
        let scale = m.iter().fold(0.0f64, |acc, x| acc.max(x.abs())).max(1.0);
        if off.sqrt() <= 1e-14 * scale {
            let mut pairs: Vec<(f64, usize)> =
                (0..n).map(|i| (m[idx(i, i)], i)).collect();
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let eigenvalues: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let eigenvectors: Vec<Vec<f64>> = pairs
                .iter()
                .map(|&(_, col)| (0..n).map(|r| v[idx(r, col)]).collect())
                .collect();
            return Ok((eigenvalues, eigenvectors));
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[idx(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m[idx(p, p)];
                let aqq = m[idx(q, q)];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[idx(k, p)];
                    let mkq = m[idx(k, q)];
                    m[idx(k, p)] = c * mkp - s * mkq;
                    m[idx(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[idx(p, k)];
                    let mqk = m[idx(q, k)];
                    m[idx(p, k)] = c * mpk - s * mqk;
                    m[idx(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[idx(k, p)];
                    let vkq = v[idx(k, q)];
                    v[idx(k, p)] = c * vkp - s * vkq;
                    v[idx(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    Err(Error::EigenNoConvergence {
        max_sweeps: MAX_SWEEPS,
    })
}
