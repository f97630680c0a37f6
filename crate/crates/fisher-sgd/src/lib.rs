//! Fisher-SGD: maximum-likelihood estimation in latent variable models by
//! stochastic gradient ascent preconditioned with an online positive
//! definite Fisher information estimate.
//!
//! The crate provides:
//! - the estimation engine with its three-phase step schedule ([`engine`]),
//! - MCMC samplers for the latent variables ([`sampler`]),
//! - bijective reparametrizations of constrained parameters ([`reparam`]),
//! - delta-method confidence intervals and ellipsoids ([`inference`]),
//! - three benchmark models ([`models`]),
//! - and the batch CLI driving simulation, fitting and replication
//!   studies ([`cli`]).

pub mod cli;
pub mod engine;
pub mod error;
pub mod inference;
pub mod model;
pub mod models;
pub mod numerics;
pub mod reparam;
pub mod sampler;

pub use error::{Error, Result};
