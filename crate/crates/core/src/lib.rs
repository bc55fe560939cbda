//! Multi-species distribution models that condition on an arbitrary,
//! incomplete subset of observed species alongside environmental predictors.
//!
//! The crate bundles a small reverse-mode autodiff engine ([`numerics`]),
//! data plumbing ([`dataio`], [`colocate`]), the five model families
//! ([`models`]), label-mask training and evaluation ([`training`],
//! [`metrics`]) and a synthetic community generator with an exact Bayes
//! oracle ([`synth`]).

pub mod cli;
pub mod colocate;
pub mod dataio;
pub mod encoding;
pub mod error;
pub mod features;
pub mod metrics;
pub mod models;
pub mod numerics;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
