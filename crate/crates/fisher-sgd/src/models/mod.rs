//! Concrete benchmark models: a closed-form toy Gaussian hierarchy used
//! as an oracle, the logistic-growth nonlinear mixed-effects model and
//! the stochastic block model.

pub mod logistic;
pub mod sbm;
pub mod toy;

pub use logistic::LogisticGrowthNlme;
pub use sbm::{Adjacency, Sbm};
pub use toy::ToyGaussian;
