//! Data mixing agent pipeline on a synthetic multi-domain environment.

pub mod agent;
pub mod env;
pub mod error;
pub mod mdp;
pub mod orchestrator;
pub mod pipeline;
pub mod rng;
pub mod sampler;

pub use datamix_nn as nn;
pub use error::{Error, Result};
