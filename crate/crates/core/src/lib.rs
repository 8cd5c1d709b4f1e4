//! Offline tuning of differentiable heuristic bidding policies.
//!
//! The crate covers the whole pipeline: a budget-constrained auction
//! simulator, behavior-policy data collection, a hybrid actor-critic trained
//! with a conservative Q-learning variant, and evaluation diagnostics. Only
//! the tuned base-policy parameters are meant to leave the pipeline.

pub mod agent;
pub mod binio;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod mdp;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod sim;
pub mod trainer;

pub use error::{Error, Result};
