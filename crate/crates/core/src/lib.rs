//! Proximal survival analysis under dependent right censoring.
//!
//! The crate estimates a marginal survival probability `P(T > tau)` when the
//! censoring time depends on the event time through an unmeasured factor, using
//! two observed proxies of that factor. It provides
//!
//! - domain types for right-censored records with proxy covariates ([`data`]),
//! - a synthetic data generator with a known ground truth ([`datagen`]),
//! - recursive estimation of the event-side and censoring-side bridge
//!   processes ([`bridge`]),
//! - the event-inducing, censoring-inducing and doubly robust estimators plus
//!   classical baselines ([`estimators`]),
//! - bootstrap inference and a Monte Carlo study harness ([`inference`]),
//! - a population-level oracle that checks the identification identities
//!   numerically ([`oracle`]),
//! - a configuration-driven command line front end ([`cli`]).

pub mod bridge;
pub mod cli;
pub mod data;
pub mod datagen;
pub mod error;
pub mod estimators;
pub mod inference;
pub mod linalg;
pub mod oracle;
pub mod quadrature;

pub use error::{Error, Result};
