//! Contracts implemented by latent variable models.
//!
//! Two flavors: [`IndependentModel`] for models whose complete likelihood
//! splits over units (each unit carries its own latent vector), and
//! [`GlobalModel`] for models where the latent variables are coupled given
//! the observations, such as the stochastic block model.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::SymMatrix;
use crate::reparam::Bijection;

/// A latent variable model with independent units.
///
/// Gradients are expressed in the unconstrained estimation space: each
/// model chains its original-space score through `reparam().jacobian`
/// internally so the optimizer never sees constraints.
pub trait IndependentModel: Sync {
    /// Number of independent units.
    fn n_units(&self) -> usize;

    /// Dimension of the unconstrained parameter vector.
    fn theta_dim(&self) -> usize;

    /// Chart between R^theta_dim and the original parameter space.
    fn reparam(&self) -> &Bijection;

    /// Latent dimension of unit `i`.
    fn latent_dim(&self, i: usize) -> usize;

    /// Initial latent state of unit `i` at the starting parameter, used
    /// to seed the Metropolis-within-Gibbs chain. Defaults to zeros;
    /// models whose latents live far from the origin should override it
    /// (e.g. with the prior mean) so the chain starts in a plausible
    /// region.
    fn init_latent_unit(&self, i: usize, _theta: &[f64]) -> Vec<f64> {
        vec![0.0; self.latent_dim(i)]
    }

    /// log f(y_i, z_i; theta).
    fn log_complete_unit(&self, i: usize, z: &[f64], theta: &[f64]) -> f64;

    /// Gradient of `log_complete_unit` with respect to theta.
    fn grad_log_complete_unit(&self, i: usize, z: &[f64], theta: &[f64]) -> Vec<f64>;

    /// Exact draw from the posterior of z_i given y_i, when the model
    /// supports it. Default: not available.
    fn exact_posterior_draw(&self, _i: usize, _theta: &[f64], _rng: &mut ChaCha8Rng) -> Option<Vec<f64>> {
        None
    }

    fn has_exact_posterior(&self) -> bool {
        false
    }

    /// Names of the flattened original-space parameters, matching
    /// `reparam().forward` output order.
    fn param_names(&self) -> Vec<String>;
}

/// A latent variable model with coupled latent variables.
pub trait GlobalModel: Sync {
    /// The latent state type, e.g. a label vector.
    type Latent: Clone + Send;

    fn theta_dim(&self) -> usize;

    fn reparam(&self) -> &Bijection;

    fn param_names(&self) -> Vec<String>;

    /// Draws an initial latent state.
    fn init_latent(&self, rng: &mut ChaCha8Rng) -> Self::Latent;

    /// One sweep of the model's Markov kernel leaving the posterior of Z
    /// invariant (e.g. a Gibbs sweep).
    fn sample_latent(&self, z: &mut Self::Latent, theta: &[f64], rng: &mut ChaCha8Rng);

    /// True when the latent state has degenerated (e.g. an empty class),
    /// signalling that the run must be restarted.
    fn latent_degenerate(&self, _z: &Self::Latent) -> bool {
        false
    }

    /// log f(y, z; theta).
    fn log_complete(&self, z: &Self::Latent, theta: &[f64]) -> f64;

    /// Gradient of `log_complete` with respect to theta.
    fn grad_log_complete(&self, z: &Self::Latent, theta: &[f64]) -> Vec<f64>;

    /// Hessian of `log_complete` with respect to theta. The default is a
    /// central finite difference of the analytic gradient.
    fn hessian_log_complete(&self, z: &Self::Latent, theta: &[f64]) -> Result<SymMatrix> {
        let d = self.theta_dim();
        let mut raw = vec![0.0; d * d];
        for j in 0..d {
            let step = 1e-5 * (1.0 + theta[j].abs());
            let mut tp = theta.to_vec();
            let mut tm = theta.to_vec();
            tp[j] += step;
            tm[j] -= step;
            let gp = self.grad_log_complete(z, &tp);
            let gm = self.grad_log_complete(z, &tm);
            for i in 0..d {
                raw[i * d + j] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        // from_rows symmetrizes (H + Hᵀ)/2.
        SymMatrix::from_rows(d, &raw)
    }

    /// Number of score terms in the structured decomposition used for the
    /// Fisher information estimate (e.g. per-edge plus per-node terms).
    fn score_bank_len(&self) -> usize;

    /// Writes the per-term scores at (z, theta) into `terms`, one vector
    /// of length `theta_dim` per bank slot. Their sum is the full
    /// complete-data score.
    fn score_terms_into(&self, z: &Self::Latent, theta: &[f64], terms: &mut [Vec<f64>]);
}
