//! Ensemble robustness of stochastically trained feed-forward networks.
//!
//! A randomized learner maps a training set to a distribution over
//! hypotheses. This crate trains seed ensembles from several such learners
//! ([`train`]), measures how far each member's loss moves under linearized
//! adversarial perturbations of the training samples ([`robustness`]),
//! evaluates the generalization bounds that this quantity controls
//! ([`bounds`]) and correlates it with observed generalization gaps
//! ([`analysis`]). [`experiment`] wires everything together for the
//! `ensrob` command-line tool.

pub mod analysis;
pub mod bounds;
pub mod data;
pub mod error;
pub mod experiment;
pub mod nn;
pub mod robustness;
pub mod train;

pub use error::{Error, Result};
