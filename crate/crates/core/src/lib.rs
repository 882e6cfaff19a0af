//! Privacy-preserving multisite estimation of individualized treatment rules.
//!
//! Each site fits its own linear outcome model (treatment-free part plus a
//! blip describing the treatment contrast), detects which coefficients its
//! data can identify, and transmits only blip coefficient estimates, their
//! standard deviations, and a reparametrization map linking them to the
//! global blip parameters. A coordinator pools the summaries in a Bayesian
//! hierarchical model with shrinkage priors, extracts the treatment rule,
//! and evaluates it against truth-known cohorts.
//!
//! Module map:
//! - [`model`]: model specifications, datasets, design matrices
//! - [`stage_one`]: per-site OLS, estimability detection, summary emission
//! - [`sparsity`]: reparametrization maps for sites with sparse data
//! - [`stage_two`]: the coordinator's hierarchical model and Gibbs sampler
//! - [`one_stage`]: full-data comparator model fitted in one pass
//! - [`itr`]: rule extraction, decisions/doses, value-function evaluation
//! - [`simgen`]: simulation-study data-generating mechanisms
//! - [`federation`]: summary schema, validation, file and TCP exchange
//! - [`study`]: replicated study orchestration and performance metrics

pub mod error;
pub mod federation;
pub mod itr;
pub mod linalg;
pub mod mcmc;
pub mod model;
pub mod one_stage;
pub mod simgen;
pub mod sparsity;
pub mod stage_one;
pub mod stage_two;
pub mod study;

pub use error::{Error, Result};
