//! Gaussian-Gaussian hierarchy with every quantity available in closed
//! form: z_i ~ N(mu, omega2), y_i | z_i ~ N(z_i, sigma2) with sigma2
//! known. Used as the oracle model in verification runs: the posterior,
//! the marginal likelihood, the MLE and the Fisher information are all
//! explicit.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::model::IndependentModel;
use crate::numerics::SymMatrix;
use crate::reparam::{compose, Bijection};

const LN_2PI: f64 = 1.837_877_066_409_345_6;

/// Chart: theta = (mu, ln omega2).
pub struct ToyGaussian {
    y: Vec<f64>,
    sigma2_noise: f64,
    reparam: Bijection,
}

impl ToyGaussian {
    pub fn new(y: Vec<f64>, sigma2_noise: f64) -> Self {
        assert!(sigma2_noise > 0.0, "noise variance must be positive");
        ToyGaussian {
            y,
            sigma2_noise,
            reparam: compose(vec![Bijection::Real, Bijection::Positive]),
        }
    }

    pub fn sigma2_noise(&self) -> f64 {
        self.sigma2_noise
    }

    pub fn data(&self) -> &[f64] {
        &self.y
    }

    fn unpack(&self, theta: &[f64]) -> (f64, f64) {
        let eta = self.reparam.forward(theta);
        (eta[0], eta[1])
    }

    /// Conjugate posterior of z_i given y_i: N(m_i, v).
    pub fn posterior_moments(&self, i: usize, theta: &[f64]) -> (f64, f64) {
        let (mu, omega2) = self.unpack(theta);
        let v = 1.0 / (1.0 / omega2 + 1.0 / self.sigma2_noise);
        let m = v * (mu / omega2 + self.y[i] / self.sigma2_noise);
        (m, v)
    }

    /// Closed-form marginal log-likelihood: y_i ~ N(mu, omega2 + sigma2).
    pub fn marginal_log_likelihood(&self, theta: &[f64]) -> f64 {
        let (mu, omega2) = self.unpack(theta);
        let s = omega2 + self.sigma2_noise;
        self.y
            .iter()
            .map(|&y| -0.5 * (LN_2PI + s.ln()) - (y - mu) * (y - mu) / (2.0 * s))
            .sum()
    }

    /// Analytic marginal score in chart coordinates.
    pub fn marginal_score(&self, i: usize, theta: &[f64]) -> Vec<f64> {
        let (mu, omega2) = self.unpack(theta);
        let s = omega2 + self.sigma2_noise;
        let r = self.y[i] - mu;
        let d_mu = r / s;
        let d_omega2 = -0.5 / s + r * r / (2.0 * s * s);
        vec![d_mu, d_omega2 * omega2]
    }

    pub fn simulate(
        n: usize,
        mu: f64,
        omega2: f64,
        sigma2_noise: f64,
        rng: &mut ChaCha8Rng,
    ) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let z = mu + omega2.sqrt() * rng.sample::<f64, _>(StandardNormal);
                z + sigma2_noise.sqrt() * rng.sample::<f64, _>(StandardNormal)
            })
            .collect()
    }
}

impl IndependentModel for ToyGaussian {
    fn n_units(&self) -> usize {
        self.y.len()
    }

    fn theta_dim(&self) -> usize {
        2
    }

    fn reparam(&self) -> &Bijection {
        &self.reparam
    }

    fn latent_dim(&self, _i: usize) -> usize {
        1
    }

    fn log_complete_unit(&self, i: usize, z: &[f64], theta: &[f64]) -> f64 {
        let (mu, omega2) = self.unpack(theta);
        let zi = z[0];
        let prior = -0.5 * (LN_2PI + omega2.ln()) - (zi - mu) * (zi - mu) / (2.0 * omega2);
        let lik = -0.5 * (LN_2PI + self.sigma2_noise.ln())
            - (self.y[i] - zi) * (self.y[i] - zi) / (2.0 * self.sigma2_noise);
        prior + lik
    }

    fn grad_log_complete_unit(&self, i: usize, z: &[f64], theta: &[f64]) -> Vec<f64> {
        let _ = i;
        let (mu, omega2) = self.unpack(theta);
        let u = z[0] - mu;
        let d_mu = u / omega2;
        let d_omega2 = -0.5 / omega2 + u * u / (2.0 * omega2 * omega2);
        // Chain rule through omega2 = exp(theta_2).
        vec![d_mu, d_omega2 * omega2]
    }

    fn exact_posterior_draw(
        &self,
        i: usize,
        theta: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Option<Vec<f64>> {
        let (m, v) = self.posterior_moments(i, theta);
        Some(vec![m + v.sqrt() * rng.sample::<f64, _>(StandardNormal)])
    }

    fn has_exact_posterior(&self) -> bool {
        true
    }

    fn param_names(&self) -> Vec<String> {
        vec!["mu".into(), "omega2".into()]
    }
}

/// Closed-form marginal MLE: mu_hat = mean(y), omega2_hat = var(y) -
/// sigma2, clamped to 1e-8 when the sample variance is too small.
pub fn toy_mle_oracle(y: &[f64], sigma2_noise: f64) -> (f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let omega2 = (var - sigma2_noise).max(1e-8);
    (mean, omega2)
}

/// Whole-sample Fisher information in chart coordinates at `theta`.
pub fn toy_fim_oracle(theta: &[f64], sigma2_noise: f64, n: usize) -> SymMatrix {
    let omega2 = theta[1].exp();
    let s = omega2 + sigma2_noise;
    let mut f = SymMatrix::zeros(2);
    f.set(0, 0, n as f64 / s);
    f.set(1, 1, n as f64 * omega2 * omega2 / (2.0 * s * s));
    f
}
