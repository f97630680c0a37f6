//! Bijective differentiable maps between the unconstrained estimation
//! space R^d and constrained parameter blocks, with analytic Jacobians for
//! the delta method.
//!
//! Charts: positive reals via exp, (0,1) via sigmoid, the open simplex via
//! stick-breaking (offsets chosen so the origin maps to the uniform
//! vector), and symmetric positive definite matrices via log-Cholesky.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{cholesky, SymMatrix};

/// Largest exponent argument fed to `exp`; inputs are clamped to ±EXP_CLAMP
/// so the forward map stays finite for any finite input.
const EXP_CLAMP: f64 = 700.0;

/// Stick-breaking weights are kept this far inside (0,1) so the remainder
/// component of the simplex stays strictly positive in floating point.
const STICK_EPS: f64 = 1e-12;

fn clamped_exp(x: f64) -> f64 {
    x.clamp(-EXP_CLAMP, EXP_CLAMP).exp()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x.min(EXP_CLAMP)).exp())
    } else {
        let e = clamped_exp(x);
        e / (1.0 + e)
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// An invertible differentiable map from R^free_dim to a constrained block
/// of dimension original_dim (flattened).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bijection {
    /// Identity on R.
    Real,
    /// exp: R -> (0, inf).
    Positive,
    /// sigmoid: R -> (0, 1).
    Interval01,
    /// Stick-breaking map R^(K-1) -> open simplex in R^K.
    Simplex(usize),
    /// Log-Cholesky map R^(p(p+1)/2) -> SPD(p), flattened row-major.
    Spd(usize),
    /// Blockwise concatenation.
    Tuple(Vec<Bijection>),
}

/// Assembles parameter blocks into a single chart.
pub fn compose(blocks: Vec<Bijection>) -> Bijection {
    assert!(!blocks.is_empty(), "compose requires at least one block");
    Bijection::Tuple(blocks)
}

impl Bijection {
    /// Size of the unconstrained block.
    pub fn free_dim(&self) -> usize {
        match self {
            Bijection::Real | Bijection::Positive | Bijection::Interval01 => 1,
            Bijection::Simplex(k) => k - 1,
            Bijection::Spd(p) => p * (p + 1) / 2,
            Bijection::Tuple(blocks) => blocks.iter().map(|b| b.free_dim()).sum(),
        }
    }

    /// Size of the flattened constrained value.
    pub fn original_dim(&self) -> usize {
        match self {
            Bijection::Real | Bijection::Positive | Bijection::Interval01 => 1,
            Bijection::Simplex(k) => *k,
            Bijection::Spd(p) => p * p,
            Bijection::Tuple(blocks) => blocks.iter().map(|b| b.original_dim()).sum(),
        }
    }

    /// Maps an unconstrained vector to the constrained space.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.free_dim(), "forward input dimension");
        match self {
            Bijection::Real => vec![x[0]],
            Bijection::Positive => vec![clamped_exp(x[0])],
            Bijection::Interval01 => vec![sigmoid(x[0])],
            Bijection::Simplex(k) => {
                let k = *k;
                let mut p = Vec::with_capacity(k);
                let mut remaining = 1.0;
                for (i, &xi) in x.iter().enumerate() {
                    let offset = ((k - 1 - i) as f64).ln();
                    let v = sigmoid(xi - offset).clamp(STICK_EPS, 1.0 - STICK_EPS);
                    p.push(v * remaining);
                    remaining *= 1.0 - v;
                }
                // Final remainder makes the entries sum to exactly one.
                let tail = 1.0 - p.iter().sum::<f64>();
                p.push(tail.max(STICK_EPS * STICK_EPS));
                p
            }
            Bijection::Spd(p) => {
                let p = *p;
                let l = self.spd_lower(x);
                let mut out = vec![0.0; p * p];
                for a in 0..p {
                    for b in 0..p {
                        let mut s = 0.0;
                        for c in 0..=a.min(b) {
                            s += l[a * p + c] * l[b * p + c];
                        }
                        out[a * p + b] = s;
                    }
                }
                out
            }
            Bijection::Tuple(blocks) => {
                let mut out = Vec::with_capacity(self.original_dim());
                let mut off = 0;
                for b in blocks {
                    let d = b.free_dim();
                    out.extend(b.forward(&x[off..off + d]));
                    off += d;
                }
                out
            }
        }
    }

    /// Maps a value strictly inside the constraint set back to R^free_dim.
    pub fn inverse(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.original_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.original_dim(),
                got: y.len(),
            });
        }
        match self {
            Bijection::Real => Ok(vec![y[0]]),
            Bijection::Positive => {
                if y[0] <= 0.0 {
                    return Err(Error::ConstraintViolation(format!(
                        "positive chart requires y > 0, got {}",
                        y[0]
                    )));
                }
                Ok(vec![y[0].ln()])
            }
            Bijection::Interval01 => {
                if y[0] <= 0.0 || y[0] >= 1.0 {
                    return Err(Error::ConstraintViolation(format!(
                        "interval chart requires 0 < y < 1, got {}",
                        y[0]
                    )));
                }
                Ok(vec![logit(y[0])])
            }
            Bijection::Simplex(k) => {
                let k = *k;
                if y.iter().any(|&p| p <= 0.0) {
                    return Err(Error::ConstraintViolation(
                        "simplex entries must be strictly positive".into(),
                    ));
                }
                let sum: f64 = y.iter().sum();
                if (sum - 1.0).abs() > 1e-8 {
                    return Err(Error::ConstraintViolation(format!(
                        "simplex entries must sum to 1, got {sum}"
                    )));
                }
                let mut x = Vec::with_capacity(k - 1);
                let mut remaining = 1.0;
                for i in 0..k - 1 {
                    let v = y[i] / remaining;
                    if v <= 0.0 || v >= 1.0 {
                        return Err(Error::ConstraintViolation(
                            "simplex entry on the boundary".into(),
                        ));
                    }
                    let offset = ((k - 1 - i) as f64).ln();
                    x.push(logit(v) + offset);
                    remaining -= y[i];
                }
                Ok(x)
            }
            Bijection::Spd(p) => {
                let p = *p;
                let m = SymMatrix::from_rows(p, y)?;
                // Symmetry check before mirroring is applied.
                for a in 0..p {
                    for b in 0..a {
                        let diff = (y[a * p + b] - y[b * p + a]).abs();
                        if diff > 1e-8 * (1.0 + m.max_abs()) {
                            return Err(Error::ConstraintViolation(
                                "matrix is not symmetric".into(),
                            ));
                        }
                    }
                }
                let l = cholesky(&m).map_err(|_| {
                    Error::ConstraintViolation("matrix is not positive definite".into())
                })?;
                let mut x = Vec::with_capacity(p * (p + 1) / 2);
                for i in 0..p {
                    for j in 0..=i {
                        if i == j {
                            x.push(l.get(i, i).ln());
                        } else {
                            x.push(l.get(i, j));
                        }
                    }
                }
                Ok(x)
            }
            Bijection::Tuple(blocks) => {
                let mut x = Vec::with_capacity(self.free_dim());
                let mut off = 0;
                for b in blocks {
                    let d = b.original_dim();
                    x.extend(b.inverse(&y[off..off + d])?);
                    off += d;
                }
                Ok(x)
            }
        }
    }

    /// Jacobian of `forward`: original_dim rows by free_dim columns.
    pub fn jacobian(&self, x: &[f64]) -> Vec<Vec<f64>> {
        assert_eq!(x.len(), self.free_dim(), "jacobian input dimension");
        match self {
            Bijection::Real => vec![vec![1.0]],
            Bijection::Positive => vec![vec![clamped_exp(x[0])]],
            Bijection::Interval01 => {
                let v = sigmoid(x[0]);
                vec![vec![v * (1.0 - v)]]
            }
            Bijection::Simplex(k) => {
                let k = *k;
                let p = self.forward(x);
                let v: Vec<f64> = x
                    .iter()
                    .enumerate()
                    .map(|(i, &xi)| {
                        let offset = ((k - 1 - i) as f64).ln();
                        sigmoid(xi - offset).clamp(STICK_EPS, 1.0 - STICK_EPS)
                    })
                    .collect();
                let mut jac = vec![vec![0.0; k - 1]; k];
                for m in 0..k - 1 {
                    for n in 0..k - 1 {
                        jac[m][n] = if n == m {
                            p[m] * (1.0 - v[m])
                        } else if n < m {
                            -p[m] * v[n]
                        } else {
                            0.0
                        };
                    }
                }
                for n in 0..k - 1 {
                    jac[k - 1][n] = -p[k - 1] * v[n];
                }
                jac
            }
            Bijection::Spd(p) => {
                let p = *p;
                let free = p * (p + 1) / 2;
                let l = self.spd_lower(x);
                let mut jac = vec![vec![0.0; free]; p * p];
                let mut t = 0;
                for i in 0..p {
                    for j in 0..=i {
                        // dL_ij/dx_t: 1 off-diagonal, L_ii on the diagonal.
                        let dl = if i == j { l[i * p + i] } else { 1.0 };
                        for a in 0..p {
                            for b in 0..p {
                                let mut d = 0.0;
                                if a == i && j <= b.min(a) {
                                    d += dl * l[b * p + j];
                                }
                                if b == i && j <= a.min(b) {
                                    d += dl * l[a * p + j];
                                }
                                if d != 0.0 {
                                    jac[a * p + b][t] = d;
                                }
                            }
                        }
                        t += 1;
                    }
                }
                jac
            }
            Bijection::Tuple(blocks) => {
                let rows = self.original_dim();
                let cols = self.free_dim();
                let mut jac = vec![vec![0.0; cols]; rows];
                let mut row_off = 0;
                let mut col_off = 0;
                for b in blocks {
                    let sub = b.jacobian(&x[col_off..col_off + b.free_dim()]);
                    for (r, row) in sub.iter().enumerate() {
                        for (c, &v) in row.iter().enumerate() {
                            jac[row_off + r][col_off + c] = v;
                        }
                    }
                    row_off += b.original_dim();
                    col_off += b.free_dim();
                }
                jac
            }
        }
    }

    /// Lower-triangular Cholesky factor of the SPD chart, full p*p storage.
    fn spd_lower(&self, x: &[f64]) -> Vec<f64> {
        let p = match self {
            Bijection::Spd(p) => *p,
            _ => unreachable!("spd_lower only valid for Spd"),
        };
        let mut l = vec![0.0; p * p];
        let mut t = 0;
        for i in 0..p {
            for j in 0..=i {
                l[i * p + j] = if i == j { clamped_exp(x[t]) } else { x[t] };
                t += 1;
            }
        }
        l
    }
}
