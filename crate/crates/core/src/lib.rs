//! Fully Bayesian inference for stationary binary Markov random fields
//! whose maximal cliques are the translates of a single template clique.
//!
//! The crate enumerates translation-equivalent clique configuration sets,
//! converts between the potential (phi) and interaction (beta)
//! parametrisations, places a partition prior on groupings of the
//! configuration sets, and samples the posterior with a three-kernel
//! reversible-jump MCMC using exact, exchange-based or pseudo-likelihood
//! engines.

pub mod cli;
pub mod configsets;
pub mod error;
pub mod io;
pub mod lattice;
pub mod likelihood;
pub mod model;
pub mod param;
pub mod prior;
pub mod sampler;
pub mod stats;

pub use error::{Error, Result};
