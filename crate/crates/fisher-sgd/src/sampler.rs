//! Latent-variable simulation step run at each outer iteration: exact
//! posterior draws when the model provides them, otherwise a
//! Metropolis-within-Gibbs kernel (independent units) or a Gibbs sweep
//! over node labels (stochastic block model).

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::IndependentModel;
use crate::models::sbm::Adjacency;

/// Acceptance target for the coordinate-wise random-walk proposals.
const TARGET_ACCEPT: f64 = 0.44;
/// Robbins-Monro gain for the proposal-scale adaptation.
const ADAPT_GAIN: f64 = 0.05;
/// Iterations between adaptation steps.
pub const ADAPT_INTERVAL: usize = 50;

/// Adaptive state of the Metropolis-within-Gibbs kernel: one proposal
/// log-scale and acceptance window per unit and coordinate.
///
/// Adaptation is permanently frozen once the decreasing-step phase of the
/// schedule begins, so the kernel family is fixed from then on.
#[derive(Debug, Clone)]
pub struct MwgState {
    log_scales: Vec<Vec<f64>>,
    window_accepts: Vec<Vec<u64>>,
    window_proposals: Vec<Vec<u64>>,
    total_accepts: u64,
    total_proposals: u64,
    adaptation_enabled: bool,
}

impl MwgState {
    pub fn new(latent_dims: &[usize], initial_scale: f64) -> Self {
        assert!(initial_scale > 0.0);
        MwgState {
            log_scales: latent_dims
                .iter()
                .map(|&d| vec![initial_scale.ln(); d])
                .collect(),
            window_accepts: latent_dims.iter().map(|&d| vec![0; d]).collect(),
            window_proposals: latent_dims.iter().map(|&d| vec![0; d]).collect(),
            total_accepts: 0,
            total_proposals: 0,
            adaptation_enabled: true,
        }
    }

    pub fn log_scale(&self, unit: usize, coord: usize) -> f64 {
        self.log_scales[unit][coord]
    }

    pub fn adaptation_enabled(&self) -> bool {
        self.adaptation_enabled
    }

    /// Permanently disables adaptation.
    pub fn freeze(&mut self) {
        self.adaptation_enabled = false;
    }

    /// Moves each log-scale toward the acceptance target using the rates
    /// observed in the current window, then clears the window.
    pub fn adapt_window(&mut self) {
        if !self.adaptation_enabled {
            return;
        }
        for u in 0..self.log_scales.len() {
            for c in 0..self.log_scales[u].len() {
                let n = self.window_proposals[u][c];
                if n == 0 {
                    continue;
                }
                let rate = self.window_accepts[u][c] as f64 / n as f64;
                self.log_scales[u][c] += ADAPT_GAIN * (rate - TARGET_ACCEPT);
                self.window_accepts[u][c] = 0;
                self.window_proposals[u][c] = 0;
            }
        }
    }

    /// Acceptance rate since the start of the run.
    pub fn overall_acceptance(&self) -> f64 {
        if self.total_proposals == 0 {
            0.0
        } else {
            self.total_accepts as f64 / self.total_proposals as f64
        }
    }
}

/// One full coordinate sweep of random-walk Metropolis on the latent
/// vector of unit `i`, leaving the posterior of z_i invariant.
///
/// Each coordinate proposes z_c' = z_c + scale_c * eps with standard
/// normal eps and accepts with probability min(1, exp(dlog f)).
pub fn mwg_sweep<M: IndependentModel + ?Sized>(
    model: &M,
    i: usize,
    z: &mut [f64],
    theta: &[f64],
    state: &mut MwgState,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<bool>> {
    let mut log_cur = model.log_complete_unit(i, z, theta);
    if !log_cur.is_finite() {
        return Err(Error::NonFiniteLogDensity { unit: i });
    }
    let mut flags = Vec::with_capacity(z.len());
    for c in 0..z.len() {
        let scale = state.log_scales[i][c].exp();
        let eps: f64 = rng.sample(StandardNormal);
        let old = z[c];
        z[c] = old + scale * eps;
        let log_new = model.log_complete_unit(i, z, theta);
        let log_ratio = log_new - log_cur;
        let accept = if log_new.is_nan() {
            false
        } else if log_ratio >= 0.0 {
            true
        } else {
            rng.random::<f64>() < log_ratio.exp()
        };
        if accept {
            log_cur = log_new;
        } else {
            z[c] = old;
        }
        flags.push(accept);
        state.window_proposals[i][c] += 1;
        state.total_proposals += 1;
        if accept {
            state.window_accepts[i][c] += 1;
            state.total_accepts += 1;
        }
    }
    Ok(flags)
}

/// Log-space full conditional P(z_i = k | z_{-i}, y; alpha, p) for node
/// `i` of a directed SBM, returned as normalized probabilities.
///
/// `p` is the K x K connectivity matrix, row-major.
pub fn sbm_full_conditional(
    y: &Adjacency,
    z: &[usize],
    i: usize,
    alpha: &[f64],
    p: &[f64],
) -> Vec<f64> {
    let k = alpha.len();
    let n = y.n_nodes();
    // Per-class sufficient counts over the other nodes.
    let mut class_count = vec![0.0f64; k];
    let mut out_edges = vec![0.0f64; k]; // edges i -> class l
    let mut in_edges = vec![0.0f64; k]; // edges class l -> i
    for j in 0..n {
        if j == i {
            continue;
        }
        let l = z[j];
        class_count[l] += 1.0;
        out_edges[l] += y.get(i, j) as f64;
        in_edges[l] += y.get(j, i) as f64;
    }
    let mut logw = vec![0.0f64; k];
    for (cand, w) in logw.iter_mut().enumerate() {
        let mut s = alpha[cand].ln();
        for l in 0..k {
            if class_count[l] == 0.0 {
                continue;
            }
            let p_out = p[cand * k + l];
            let p_in = p[l * k + cand];
            s += out_edges[l] * p_out.ln() + (class_count[l] - out_edges[l]) * (1.0 - p_out).ln();
            s += in_edges[l] * p_in.ln() + (class_count[l] - in_edges[l]) * (1.0 - p_in).ln();
        }
        *w = s;
    }
    let max = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut probs: Vec<f64> = logw.iter().map(|&w| (w - max).exp()).collect();
    let sum: f64 = probs.iter().sum();
    for q in &mut probs {
        *q /= sum;
    }
    probs
}

/// One Gibbs sweep over the SBM labels: nodes are visited in a fresh
/// uniform random permutation and resampled from their exact full
/// conditional.
pub fn gibbs_sweep_sbm(
    y: &Adjacency,
    z: &mut [usize],
    alpha: &[f64],
    p: &[f64],
    rng: &mut ChaCha8Rng,
) {
    let k = alpha.len();
    if k == 1 {
        return;
    }
    let mut order: Vec<usize> = (0..y.n_nodes()).collect();
    order.shuffle(rng);
    for &i in &order {
        let probs = sbm_full_conditional(y, z, i, alpha, p);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = k - 1;
        for (cand, &q) in probs.iter().enumerate() {
            acc += q;
            if u < acc {
                chosen = cand;
                break;
            }
        }
        z[i] = chosen;
    }
}

/// Exact posterior draw, erroring when the model lacks the capability.
pub fn exact_posterior_draw<M: IndependentModel + ?Sized>(
    model: &M,
    i: usize,
    theta: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    model
        .exact_posterior_draw(i, theta, rng)
        .ok_or(Error::CapabilityMissing("exact_posterior_draw"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptation_fixed_point_and_steps() {
        let mut s = MwgState::new(&[1], 1.0);
        // rate = 0.44 leaves the scale unchanged.
        s.window_proposals[0][0] = 100;
        s.window_accepts[0][0] = 44;
        s.adapt_window();
        assert!(s.log_scale(0, 0).abs() < 1e-12);
        // rate = 1.0 raises the log-scale by 0.05 * 0.56.
        s.window_proposals[0][0] = 100;
        s.window_accepts[0][0] = 100;
        s.adapt_window();
        assert!((s.log_scale(0, 0) - 0.028).abs() < 1e-12);
        // rate = 0.0 lowers it by 0.05 * 0.44.
        s.window_proposals[0][0] = 100;
        s.window_accepts[0][0] = 0;
        s.adapt_window();
        assert!((s.log_scale(0, 0) - (0.028 - 0.022)).abs() < 1e-12);
    }

    #[test]
    fn frozen_state_does_not_adapt() {
        let mut s = MwgState::new(&[2], 1.0);
        s.freeze();
        s.window_proposals[0][0] = 10;
        s.window_accepts[0][0] = 10;
        s.adapt_window();
        assert_eq!(s.log_scale(0, 0), 0.0);
        assert!(!s.adaptation_enabled());
    }
}
