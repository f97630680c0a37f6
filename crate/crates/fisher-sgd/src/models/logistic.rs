//! Logistic growth nonlinear mixed-effects model.
//!
//! Per unit i: z_i ~ N(beta, Gamma) in R^2, and observations
//! y_ij = z_i1 / (1 + exp(-(x_ij - z_i2)/alpha)) + eps_ij with
//! eps_ij ~ N(0, sigma2). Parameters (beta1, beta2, alpha, Gamma,
//! sigma2) live in R+* x R x R+* x SPD(2) x R+*; the chart maps them to
//! R^7. Per-unit observation counts may vary (ragged data).

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::IndependentModel;
use crate::reparam::{compose, Bijection};

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Observations of one unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UnitData {
    pub times: Vec<f64>,
    pub y: Vec<f64>,
}

/// Original parameters in their constrained space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticParams {
    pub beta: [f64; 2],
    pub alpha: f64,
    /// Row-major 2x2 SPD matrix.
    pub gamma: [f64; 4],
    pub sigma2: f64,
}

impl LogisticParams {
    /// Flattened original-space vector in chart output order.
    pub fn flatten(&self) -> Vec<f64> {
        vec![
            self.beta[0],
            self.beta[1],
            self.alpha,
            self.gamma[0],
            self.gamma[1],
            self.gamma[2],
            self.gamma[3],
            self.sigma2,
        ]
    }
}

pub struct LogisticGrowthNlme {
    units: Vec<UnitData>,
    reparam: Bijection,
}

/// Mean growth curve.
fn curve(alpha: f64, z1: f64, z2: f64, x: f64) -> f64 {
    let arg = ((x - z2) / alpha).clamp(-700.0, 700.0);
    z1 / (1.0 + (-arg).exp())
}

impl LogisticGrowthNlme {
    pub fn new(units: Vec<UnitData>) -> Self {
        LogisticGrowthNlme {
            units,
            reparam: compose(vec![
                Bijection::Positive,
                Bijection::Real,
                Bijection::Positive,
                Bijection::Spd(2),
                Bijection::Positive,
            ]),
        }
    }

    pub fn units(&self) -> &[UnitData] {
        &self.units
    }

    /// Unpacks the chart value into (beta, alpha, Gamma, sigma2).
    fn unpack(&self, theta: &[f64]) -> ([f64; 2], f64, [f64; 4], f64) {
        let eta = self.reparam.forward(theta);
        (
            [eta[0], eta[1]],
            eta[2],
            [eta[3], eta[4], eta[5], eta[6]],
            eta[7],
        )
    }

    /// Gradient of log f(y_i, z_i; eta) with respect to the flattened
    /// original parameters (8 components, Gamma entries independent).
    fn grad_original(&self, i: usize, z: &[f64], eta: &[f64]) -> [f64; 8] {
        let beta = [eta[0], eta[1]];
        let alpha = eta[2];
        let g = [eta[3], eta[4], eta[5], eta[6]];
        let sigma2 = eta[7];

        let det = g[0] * g[3] - g[1] * g[2];
        let ginv = [g[3] / det, -g[1] / det, -g[2] / det, g[0] / det];
        let u = [z[0] - beta[0], z[1] - beta[1]];
        let ginv_u = [ginv[0] * u[0] + ginv[1] * u[1], ginv[2] * u[0] + ginv[3] * u[1]];

        let mut out = [0.0f64; 8];
        out[0] = ginv_u[0];
        out[1] = ginv_u[1];
        // d/dGamma_ab = -1/2 Ginv + 1/2 Ginv u uᵀ Ginv, entrywise.
        for a in 0..2 {
            for b in 0..2 {
                out[3 + a * 2 + b] =
                    -0.5 * ginv[a * 2 + b] + 0.5 * ginv_u[a] * ginv_u[b];
            }
        }
        for (x, y) in self.units[i].times.iter().zip(&self.units[i].y) {
            let arg = ((x - z[1]) / alpha).clamp(-700.0, 700.0);
            let s = 1.0 / (1.0 + (-arg).exp());
            let h = z[0] * s;
            let r = y - h;
            out[2] += r / sigma2 * (-z[0] * s * (1.0 - s) * (x - z[1]) / (alpha * alpha));
            out[7] += -0.5 / sigma2 + r * r / (2.0 * sigma2 * sigma2);
        }
        out
    }

    pub fn simulate(
        n_units: usize,
        times: &[f64],
        params: &LogisticParams,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<UnitData>> {
        let chol = gamma_cholesky(&params.gamma)?;
        let sd = params.sigma2.sqrt();
        Ok((0..n_units)
            .map(|_| {
                let e1: f64 = rng.sample(StandardNormal);
                let e2: f64 = rng.sample(StandardNormal);
                let z = [
                    params.beta[0] + chol[0] * e1,
                    params.beta[1] + chol[1] * e1 + chol[2] * e2,
                ];
                let y = times
                    .iter()
                    .map(|&x| {
                        curve(params.alpha, z[0], z[1], x)
                            + sd * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                UnitData {
                    times: times.to_vec(),
                    y,
                }
            })
            .collect())
    }
}

/// Cholesky of a 2x2 SPD matrix as (l11, l21, l22).
fn gamma_cholesky(g: &[f64; 4]) -> Result<[f64; 3]> {
    let det = g[0] * g[3] - g[1] * g[2];
    if g[0] <= 0.0 || det <= 0.0 {
        return Err(Error::ConstraintViolation(
            "Gamma must be positive definite".into(),
        ));
    }
    let l11 = g[0].sqrt();
    let l21 = g[1] / l11;
    let l22 = (g[3] - l21 * l21).sqrt();
    Ok([l11, l21, l22])
}

impl IndependentModel for LogisticGrowthNlme {
    fn n_units(&self) -> usize {
        self.units.len()
    }

    fn theta_dim(&self) -> usize {
        7
    }

    fn reparam(&self) -> &Bijection {
        &self.reparam
    }

    fn latent_dim(&self, _i: usize) -> usize {
        2
    }

    fn init_latent_unit(&self, _i: usize, theta: &[f64]) -> Vec<f64> {
        // Prior mean of the random effects: the chain must start near the
        // asymptote/inflection scale of the data, not at the origin.
        let eta = self.reparam.forward(theta);
        vec![eta[0], eta[1]]
    }

    fn log_complete_unit(&self, i: usize, z: &[f64], theta: &[f64]) -> f64 {
        let (beta, alpha, g, sigma2) = self.unpack(theta);
        let det = g[0] * g[3] - g[1] * g[2];
        let u = [z[0] - beta[0], z[1] - beta[1]];
        let quad =
            (g[3] * u[0] * u[0] - 2.0 * g[1] * u[0] * u[1] + g[0] * u[1] * u[1]) / det;
        let mut lp = -LN_2PI - 0.5 * det.ln() - 0.5 * quad;
        let half_ln = 0.5 * (LN_2PI + sigma2.ln());
        for (x, y) in self.units[i].times.iter().zip(&self.units[i].y) {
            let r = y - curve(alpha, z[0], z[1], *x);
            lp += -half_ln - r * r / (2.0 * sigma2);
        }
        lp
    }

    fn grad_log_complete_unit(&self, i: usize, z: &[f64], theta: &[f64]) -> Vec<f64> {
        let eta = self.reparam.forward(theta);
        let eta8: [f64; 8] = eta.as_slice().try_into().expect("eta has 8 entries");
        let g_orig = self.grad_original(i, z, &eta8);
        let jac = self.reparam.jacobian(theta);
        let mut g = vec![0.0; 7];
        for (m, row) in jac.iter().enumerate() {
            let gm = g_orig[m];
            if gm == 0.0 {
                continue;
            }
            for (n, &j) in row.iter().enumerate() {
                g[n] += gm * j;
            }
        }
        g
    }

    fn param_names(&self) -> Vec<String> {
        [
            "beta1", "beta2", "alpha", "Gamma11", "Gamma12", "Gamma21", "Gamma22", "sigma2",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }
}
