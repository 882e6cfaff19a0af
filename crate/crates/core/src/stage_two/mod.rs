//! The coordinator's Bayesian hierarchical model over site summaries.
//!
//! Each transmitted estimate enters the likelihood as
//!
//! ```text
//! xi_hat_ik ~ N( sum_t L_ik[t] * psi_i[t],  sd(xi_hat_ik)^2 )
//! psi_i[t]  ~ N( psi[t], sigma_psi[t]^2 )
//! ```
//!
//! with the map rows `L_ik` taken verbatim from the summaries, so sites with
//! sparse data contribute likelihood on exactly the parameter combinations
//! they can estimate. Common means carry normal, sign-truncated normal, or
//! horseshoe priors; every scale parameter carries a half-Cauchy prior
//! expressed through its inverse-gamma auxiliary representation, which keeps
//! the whole sampler a tuning-free Gibbs scheme.

mod graph;
mod posterior;
mod priors;
mod sampler;

pub use graph::{assemble_likelihood, LikelihoodGraph, ObsNode, SiteBlock};
pub use posterior::{
    select_interactions, ChainMeta, ParamSummary, PooledPosterior, PosteriorSummaryDoc,
};
pub use priors::{MeanPrior, PriorConfig, ResolvedPriors, VariancePrior};
pub use sampler::{conditionals, run_mcmc, McmcSettings};
