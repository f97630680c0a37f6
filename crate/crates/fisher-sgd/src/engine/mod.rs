//! Stochastic gradient ascent for latent variable models, preconditioned
//! by an online outer-product estimate of the Fisher information.
//!
//! Each iteration simulates the latent variables given the current
//! parameter, averages per-term gradient recursions into a running
//! information matrix, and moves the parameter along the preconditioned
//! mean score with the three-phase step schedule of [`schedule`].

pub mod schedule;

pub use schedule::{precondition, step_size, Phase, PhaseState, Schedule};

use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{GlobalModel, IndependentModel};
use crate::numerics::{spd_solve, SymMatrix};
use crate::sampler::{mwg_sweep, MwgState, ADAPT_INTERVAL};

/// Per-iteration diagnostics retained for trajectory output.
#[derive(Debug, Clone, Serialize)]
pub struct TrajectoryRecord {
    pub k: usize,
    pub gamma: f64,
    pub phase: Phase,
    pub theta: Vec<f64>,
    pub grad_norm: f64,
    pub accept_rate: f64,
}

/// Outcome of a fitting run. `Z` is the latent state type: one latent
/// vector per unit for independent models, a label vector for the
/// stochastic block model.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult<Z> {
    /// Final parameter in the unconstrained chart.
    pub theta_hat: Vec<f64>,
    /// Whole-sample Fisher information estimate in chart coordinates.
    pub fim_whole: SymMatrix,
    /// Latent draws from the last `r_tail` iterations.
    pub tail_latents: Vec<Z>,
    pub trajectory: Vec<TrajectoryRecord>,
    /// Iteration at which the heating phase stopped, if it did.
    pub k_end_heating: Option<usize>,
    /// Number of discarded attempts before this one succeeded.
    pub restarts: usize,
    /// Overall proposal acceptance rate (1 when sampling is exact).
    pub mean_acceptance: f64,
}

/// A failed run, carrying whatever trajectory was recorded before the
/// failure so callers can still emit it.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub trajectory: Vec<TrajectoryRecord>,
}

impl From<Error> for RunFailure {
    fn from(error: Error) -> Self {
        RunFailure { error, trajectory: Vec::new() }
    }
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.error.fmt(f)
    }
}

impl std::error::Error for RunFailure {}

pub type RunOutcome<Z> = std::result::Result<RunResult<Z>, RunFailure>;

/// In-place gradient averaging recursion:
/// delta <- (1 - gamma) * delta + gamma * grad.
pub fn update_delta(delta: &mut [f64], grad: &[f64], gamma: f64) {
    debug_assert_eq!(delta.len(), grad.len());
    for (d, g) in delta.iter_mut().zip(grad) {
        *d = (1.0 - gamma) * *d + gamma * g;
    }
}

/// Mean outer product of the recursion states: (1/N) sum delta deltaᵀ.
pub fn fim_outer(deltas: &[Vec<f64>]) -> SymMatrix {
    let d = deltas.first().map_or(0, Vec::len);
    let mut m = SymMatrix::zeros(d);
    for delta in deltas {
        m.add_scaled_outer(delta, 1.0);
    }
    if !deltas.is_empty() {
        m.scale(1.0 / deltas.len() as f64);
    }
    m
}

/// Solves P x = b, escalating a diagonal jitter of lambda * (tr(P)/d)
/// from 1e-8 by doubling when the factorization fails. Gives up past
/// lambda = 1e-2.
pub fn solve_with_jitter(p: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if let Ok(x) = spd_solve(p, b) {
        return Ok(x);
    }
    let base = p.trace() / p.dim() as f64;
    let mut lambda = 1e-8;
    while lambda <= 1e-2 {
        let mut jittered = p.clone();
        for i in 0..p.dim() {
            jittered.set(i, i, jittered.get(i, i) + lambda * base);
        }
        if let Ok(x) = spd_solve(&jittered, b) {
            return Ok(x);
        }
        lambda *= 2.0;
    }
    Err(Error::Diverged(
        "preconditioner stayed indefinite through the jitter ladder".into(),
    ))
}

fn euclidean_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Options for [`run_independent`].
#[derive(Debug, Clone)]
pub struct IndependentOptions {
    /// Metropolis-within-Gibbs sweeps per iteration.
    pub sweeps: usize,
    /// Initial random-walk proposal scale.
    pub initial_scale: f64,
    /// Adapt the proposal scales toward the target acceptance rate.
    pub adaptation: bool,
    /// Use the Metropolis kernel even when an exact posterior draw is
    /// available.
    pub force_mwg: bool,
    pub record_trajectory: bool,
}

impl Default for IndependentOptions {
    fn default() -> Self {
        IndependentOptions {
            sweeps: 1,
            initial_scale: 1.0,
            adaptation: true,
            force_mwg: false,
            record_trajectory: true,
        }
    }
}

/// Runs the algorithm on a model with independent units.
///
/// The information estimate is the mean of per-unit outer products, and
/// the returned `fim_whole` is scaled back to the whole sample
/// (N times the final per-unit estimate).
pub fn run_independent<M: IndependentModel + ?Sized>(
    model: &M,
    schedule: &Schedule,
    theta0: &[f64],
    opts: &IndependentOptions,
    rng: &mut ChaCha8Rng,
) -> RunOutcome<Vec<Vec<f64>>> {
    let mut trajectory = Vec::new();
    match run_independent_inner(model, schedule, theta0, opts, rng, &mut trajectory) {
        Ok(mut result) => {
            result.trajectory = trajectory;
            Ok(result)
        }
        Err(error) => Err(RunFailure { error, trajectory }),
    }
}

fn run_independent_inner<M: IndependentModel + ?Sized>(
    model: &M,
    schedule: &Schedule,
    theta0: &[f64],
    opts: &IndependentOptions,
    rng: &mut ChaCha8Rng,
    trajectory: &mut Vec<TrajectoryRecord>,
) -> Result<RunResult<Vec<Vec<f64>>>> {
    schedule.validate()?;
    let n = model.n_units();
    let d = model.theta_dim();
    if theta0.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta0.len() });
    }
    let use_exact = model.has_exact_posterior() && !opts.force_mwg;
    let latent_dims: Vec<usize> = (0..n).map(|i| model.latent_dim(i)).collect();
    let mut z: Vec<Vec<f64>> = (0..n).map(|i| model.init_latent_unit(i, theta0)).collect();
    let mut mwg = MwgState::new(&latent_dims, opts.initial_scale);
    if !opts.adaptation {
        mwg.freeze();
    }
    let mut deltas = vec![vec![0.0; d]; n];
    let mut theta = theta0.to_vec();
    let mut phase = PhaseState::new(schedule);
    let mut i_star = SymMatrix::zeros(d);
    let tail_start = schedule.k_total.saturating_sub(schedule.r_tail);
    let mut tail_latents = Vec::new();

    for k in 1..=schedule.k_total {
        phase.maybe_enter_heating(k, schedule);
        let gamma = step_size(k, schedule, &phase);

        for i in 0..n {
            if use_exact {
                z[i] = model
                    .exact_posterior_draw(i, &theta, rng)
                    .ok_or(Error::CapabilityMissing("exact_posterior_draw"))?;
            } else {
                for _ in 0..opts.sweeps {
                    mwg_sweep(model, i, &mut z[i], &theta, &mut mwg, rng)?;
                }
            }
        }

        let mut v = vec![0.0; d];
        for i in 0..n {
            let g = model.grad_log_complete_unit(i, &z[i], &theta);
            update_delta(&mut deltas[i], &g, gamma);
            for (acc, gi) in v.iter_mut().zip(&g) {
                *acc += gi;
            }
        }
        for acc in &mut v {
            *acc /= n as f64;
        }

        i_star = fim_outer(&deltas);
        let p = precondition(&i_star, gamma, phase.phase);
        let direction = solve_with_jitter(&p, &v)?;
        for (t, dir) in theta.iter_mut().zip(&direction) {
            *t += gamma * dir;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged(format!("non-finite parameter at iteration {k}")));
        }

        if phase.phase == Phase::Heating && phase.heating_update(&v, k, schedule)? {
            // Kernel family is frozen once the decreasing phase begins.
            mwg.freeze();
        }
        if !use_exact && k % ADAPT_INTERVAL == 0 {
            mwg.adapt_window();
        }

        if opts.record_trajectory {
            trajectory.push(TrajectoryRecord {
                k,
                gamma,
                phase: phase.phase,
                theta: theta.clone(),
                grad_norm: euclidean_norm(&v),
                accept_rate: if use_exact { 1.0 } else { mwg.overall_acceptance() },
            });
        }
        if k > tail_start {
            tail_latents.push(z.clone());
        }
    }

    let mut fim_whole = i_star;
    fim_whole.scale(n as f64);
    Ok(RunResult {
        theta_hat: theta,
        fim_whole,
        tail_latents,
        trajectory: Vec::new(),
        k_end_heating: phase.k_end_heating,
        restarts: 0,
        mean_acceptance: if use_exact { 1.0 } else { mwg.overall_acceptance() },
    })
}

/// Options for [`run_global`].
#[derive(Debug, Clone)]
pub struct GlobalOptions {
    /// Markov kernel sweeps per iteration.
    pub sweeps: usize,
    /// Attempts allowed after a degenerate latent state before erroring.
    pub max_restarts: usize,
    pub record_trajectory: bool,
}

impl Default for GlobalOptions {
    fn default() -> Self {
        GlobalOptions { sweeps: 1, max_restarts: 20, record_trajectory: true }
    }
}

enum Attempt<Z> {
    Done(RunResult<Z>),
    Degenerate,
}

/// Runs the algorithm on a model with coupled latent variables.
///
/// The information estimate sums one gradient recursion per score term
/// (whole-sample scale), and the final `fim_whole` is the negated
/// average of the complete-data Hessians over the tail iterations,
/// which is positive definite near the maximizer. A degenerate latent
/// state (e.g. an empty class) restarts the whole run from a fresh
/// initialization, up to `max_restarts` times.
pub fn run_global<M: GlobalModel>(
    model: &M,
    schedule: &Schedule,
    init_theta: &dyn Fn(&mut ChaCha8Rng) -> Vec<f64>,
    opts: &GlobalOptions,
    rng: &mut ChaCha8Rng,
) -> RunOutcome<M::Latent> {
    if let Err(e) = schedule.validate() {
        return Err(e.into());
    }
    let mut trajectory = Vec::new();
    for attempt in 0..=opts.max_restarts {
        trajectory.clear();
        match run_global_once(model, schedule, init_theta, opts, rng, &mut trajectory) {
            Ok(Attempt::Done(mut result)) => {
                result.restarts = attempt;
                result.trajectory = trajectory;
                return Ok(result);
            }
            Ok(Attempt::Degenerate) => continue,
            Err(error) => return Err(RunFailure { error, trajectory }),
        }
    }
    Err(RunFailure {
        error: Error::RestartLimitExceeded { max_restarts: opts.max_restarts },
        trajectory,
    })
}

fn run_global_once<M: GlobalModel>(
    model: &M,
    schedule: &Schedule,
    init_theta: &dyn Fn(&mut ChaCha8Rng) -> Vec<f64>,
    opts: &GlobalOptions,
    rng: &mut ChaCha8Rng,
    trajectory: &mut Vec<TrajectoryRecord>,
) -> Result<Attempt<M::Latent>> {
    let d = model.theta_dim();
    let mut theta = init_theta(rng);
    if theta.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: theta.len() });
    }
    let mut z = model.init_latent(rng);
    let bank = model.score_bank_len();
    let mut deltas = vec![vec![0.0; d]; bank];
    let mut terms = vec![vec![0.0; d]; bank];
    let mut phase = PhaseState::new(schedule);
    let tail_start = schedule.k_total.saturating_sub(schedule.r_tail);
    let mut tail_latents = Vec::new();
    let mut hessian_sum = SymMatrix::zeros(d);
    let mut hessian_count = 0usize;

    for k in 1..=schedule.k_total {
        phase.maybe_enter_heating(k, schedule);
        let gamma = step_size(k, schedule, &phase);

        for _ in 0..opts.sweeps {
            model.sample_latent(&mut z, &theta, rng);
        }
        if model.latent_degenerate(&z) {
            return Ok(Attempt::Degenerate);
        }

        model.score_terms_into(&z, &theta, &mut terms);
        let mut v = vec![0.0; d];
        for (delta, term) in deltas.iter_mut().zip(&terms) {
            update_delta(delta, term, gamma);
            for (acc, t) in v.iter_mut().zip(term) {
                *acc += t;
            }
        }

        let mut i_star = SymMatrix::zeros(d);
        for delta in &deltas {
            i_star.add_scaled_outer(delta, 1.0);
        }
        let p = precondition(&i_star, gamma, phase.phase);
        let direction = solve_with_jitter(&p, &v)?;
        for (t, dir) in theta.iter_mut().zip(&direction) {
            *t += gamma * dir;
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(Error::Diverged(format!("non-finite parameter at iteration {k}")));
        }

        if phase.phase == Phase::Heating {
            phase.heating_update(&v, k, schedule)?;
        }

        if opts.record_trajectory {
            trajectory.push(TrajectoryRecord {
                k,
                gamma,
                phase: phase.phase,
                theta: theta.clone(),
                grad_norm: euclidean_norm(&v),
                accept_rate: 1.0,
            });
        }
        if k > tail_start {
            hessian_sum.add(&model.hessian_log_complete(&z, &theta)?);
            hessian_count += 1;
            tail_latents.push(z.clone());
        }
    }

    let fim_whole = fim_tail_hessian(&hessian_sum, hessian_count);
    Ok(Attempt::Done(RunResult {
        theta_hat: theta,
        fim_whole,
        tail_latents,
        trajectory: Vec::new(),
        k_end_heating: phase.k_end_heating,
        restarts: 0,
        mean_acceptance: 1.0,
    }))
}

/// Information estimate from accumulated tail Hessians: the negated
/// average -(1/r) sum H_k.
pub fn fim_tail_hessian(hessian_sum: &SymMatrix, count: usize) -> SymMatrix {
    let mut fim = hessian_sum.clone();
    if count > 0 {
        fim.scale(-1.0 / count as f64);
    }
    fim
}
