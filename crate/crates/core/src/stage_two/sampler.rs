//! Gibbs sampler for the pooling model.
//!
//! Every update is an exact conjugate draw:
//!
//! - common means `psi_t` are updated from their site-effect-integrated
//!   (marginal) Gaussian conditionals, `xi_i ~ N(M_i psi, D_i + M_i S M_i')`
//!   with `S = diag(sigma_t^2)`: integrating the site effects out avoids the
//!   random-walk behaviour the centered scheme exhibits when the between-site
//!   variances concentrate near zero. Sign-constrained means draw from the
//!   one-sided truncation of the same conditional;
//! - site-effect blocks `psi_i` are then redrawn from their multivariate
//!   Gaussian conditionals given the fresh common means (partially collapsed
//!   Gibbs: marginalize, draw, then redraw what was integrated out);
//! - the half-Cauchy between-site scales use the parameter-expanded form
//!   `sigma_t = |alpha_t| omega_t` with `alpha_t ~ N(0, scale^2)` and
//!   `omega_t^2 ~ InvGamma(1/2, 1/2)`: site effects are carried as
//!   standardized deviations `eta`, the slope `alpha_t` gets a data-informed
//!   Gaussian draw, and `omega_t^2` an inverse-gamma one. This avoids the
//!   slow log-scale random walk the direct inverse-gamma mixture exhibits
//!   when a scale is weakly identified;
//! - each horseshoe local scale `lambda_t` is drawn from its exact 1-D
//!   conditional with `psi_t` integrated out (inverse-CDF on a dense
//!   log-scale grid), immediately followed by `psi_t | lambda_t`, so the
//!   pair moves as a block and shrunk/unshrunk regime switches are not
//!   rate-limited; the global `tau^2` keeps the inverse-gamma auxiliary
//!   representation of the half-Cauchy:
//!   `x^2 | nu ~ InvGamma(1/2, 1/nu)`, `nu ~ InvGamma(1/2, 1/scale^2)`.
//!
//! Chains draw from independent generator streams derived from the master
//! seed by chain index, so results are reproducible and chain-order merges
//! are deterministic.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, Cholesky, Matrix};
use crate::mcmc::{
    inverse_gamma_draw, mvn_draw_from_precision, substream_rng, GaussianCond, TruncationSign,
};

use super::graph::LikelihoodGraph;
use super::posterior::{ChainMeta, PooledPosterior};
use super::priors::{MeanPrior, ResolvedPriors, VariancePrior};

/// Chain controls. Defaults mirror common practice for this model family:
/// two chains of 1000 warmup plus 1000 kept draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcSettings {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_kept: usize,
    pub seed: u64,
}

impl Default for McmcSettings {
    fn default() -> Self {
        McmcSettings {
            n_chains: 2,
            n_warmup: 1000,
            n_kept: 1000,
            seed: 0,
        }
    }
}

impl McmcSettings {
    pub fn with_seed(seed: u64) -> Self {
        McmcSettings {
            seed,
            ..Default::default()
        }
    }
}

/// Closed-form full-conditional parameters, exposed so tests can check every
/// Gibbs update against independent derivations.
pub mod conditionals {
    use super::*;

    /// `psi_t`'s site-effect-integrated conditional. Each site referencing
    /// `t` contributes `(g, lin)` with `g = m_t' C^{-1} m_t` and
    /// `lin = m_t' C^{-1} (xi - M psi + m_t psi_t)`, where `C` is the site's
    /// marginal covariance `D + M_s S M_s'`.
    pub fn common_mean_marginal(
        prior_precision: f64,
        contributions: &[(f64, f64)],
    ) -> GaussianCond {
        let mut prec = prior_precision;
        let mut wsum = 0.0;
        for &(g, lin) in contributions {
            prec += g;
            wsum += lin;
        }
        GaussianCond::from_precision(prec, wsum)
    }

    /// `psi_t` given site effects (used by the one-stage model): precision
    /// `prior + n/sigma2`, weighted sum `sum(psi_it)/sigma2`.
    pub fn common_mean_hierarchical(
        prior_precision: f64,
        n_active: usize,
        sum_site_effects: f64,
        sigma2: f64,
    ) -> GaussianCond {
        let prec = prior_precision + n_active as f64 / sigma2;
        let wsum = sum_site_effects / sigma2;
        GaussianCond::from_precision(prec, wsum)
    }

    /// `sigma_t^2` given site effects and its auxiliary: InvGamma with shape
    /// `1/2 + n/2` and rate `1/nu + ss/2`. (Used by the one-stage sampler,
    /// whose scales are data-dominated.)
    pub fn between_variance(n_active: usize, sum_sq_dev: f64, nu: f64) -> (f64, f64) {
        (0.5 + n_active as f64 / 2.0, 1.0 / nu + sum_sq_dev / 2.0)
    }

    /// Parameter-expanded slope `alpha_t`: a Gaussian regression update.
    /// Each observation node where `t` carries a standardized deviation
    /// contributes `(k, residual_excluding_t, 1/sd^2)` with
    /// `k = weight * eta_it`.
    pub fn px_slope(prior_precision: f64, terms: &[(f64, f64, f64)]) -> GaussianCond {
        let mut prec = prior_precision;
        let mut wsum = 0.0;
        for &(k, residual, inv_var) in terms {
            prec += k * k * inv_var;
            wsum += k * residual * inv_var;
        }
        GaussianCond::from_precision(prec, wsum)
    }

    /// Parameter-expanded base variance `omega_t^2 | eta`:
    /// InvGamma(1/2 + n/2, 1/2 + sum(eta^2)/2).
    pub fn px_base_variance(n_active: usize, sum_eta_sq: f64) -> (f64, f64) {
        (0.5 + n_active as f64 / 2.0, 0.5 + sum_eta_sq / 2.0)
    }

    /// Auxiliary for a half-Cauchy(0, scale) scale parameter `x`:
    /// `nu | x^2 ~ InvGamma(1, 1/scale^2 + 1/x^2)`.
    pub fn half_cauchy_aux(scale: f64, x2: f64) -> (f64, f64) {
        (1.0, 1.0 / (scale * scale) + 1.0 / x2)
    }

    /// Horseshoe local scale: `lambda_t^2 ~ InvGamma(1, 1/nu + psi^2/(2 tau^2))`.
    pub fn local_shrinkage(psi: f64, tau2: f64, nu_lambda: f64) -> (f64, f64) {
        (1.0, 1.0 / nu_lambda + psi * psi / (2.0 * tau2))
    }

    /// Horseshoe global scale over `m` components:
    /// `tau^2 ~ InvGamma((m+1)/2, 1/nu + sum(psi^2/lambda^2)/2)`.
    pub fn global_shrinkage(m: usize, sum_psi2_over_lambda2: f64, nu_tau: f64) -> (f64, f64) {
        ((m as f64 + 1.0) / 2.0, 1.0 / nu_tau + sum_psi2_over_lambda2 / 2.0)
    }

    /// Site-effect block: posterior precision and linear term from the
    /// likelihood Gram matrix plus the hierarchical level.
    pub fn site_block(
        lik_prec: &Matrix,
        lik_b: &[f64],
        sigma2: &[f64],
        common_means: &[f64],
    ) -> (Matrix, Vec<f64>) {
        let d = lik_b.len();
        let mut prec = lik_prec.clone();
        let mut b = lik_b.to_vec();
        for j in 0..d {
            prec.set(j, j, prec.get(j, j) + 1.0 / sigma2[j]);
            b[j] += common_means[j] / sigma2[j];
        }
        (prec, b)
    }
}

struct PreparedNode {
    estimate: f64,
    inv_var: f64,
    /// Weights on this site's sampled effects, as (position, weight).
    sampled: Vec<(usize, f64)>,
    /// Weights on pinned-to-zero-variance components, as (global index, weight).
    pinned: Vec<(usize, f64)>,
}

struct PreparedSite {
    /// All components referenced by this site's rows, ascending.
    active_all: Vec<usize>,
    /// Components with a sampled site effect (variance not pinned to zero).
    active_sampled: Vec<usize>,
    /// Positions within `active_all` of the sampled components.
    sampled_pos: Vec<usize>,
    /// Weight column per `active_all` position, over the site's nodes.
    m_cols: Vec<Vec<f64>>,
    estimates: Vec<f64>,
    sd2: Vec<f64>,
    nodes: Vec<PreparedNode>,
    /// Likelihood Gram matrix over the sampled effects (constant).
    lik_prec: Matrix,
}

struct Prepared {
    sites: Vec<PreparedSite>,
    /// Per component: (site index, position in that site's `active_all`).
    refs: Vec<Vec<(usize, usize)>>,
    /// Per component: sites carrying a sampled effect for it.
    sites_active: Vec<Vec<usize>>,
    horseshoe: Vec<usize>,
    /// No observation row references two horseshoe components at once; the
    /// global scale can then be drawn with every horseshoe mean integrated
    /// out exactly.
    horseshoe_uncoupled: bool,
    fixed_variance: Vec<Option<f64>>,
}

fn prepare(graph: &LikelihoodGraph, priors: &ResolvedPriors) -> Result<Prepared> {
    let q = graph.n_psi;
    let pinned_zero: Vec<bool> = priors
        .variance
        .iter()
        .map(|v| matches!(v, VariancePrior::Fixed { value } if *value == 0.0))
        .collect();
    let fixed_variance: Vec<Option<f64>> = priors
        .variance
        .iter()
        .map(|v| match v {
            VariancePrior::Fixed { value } => Some(*value),
            VariancePrior::HalfCauchy { .. } => None,
        })
        .collect();

    let mut sites = Vec::with_capacity(graph.sites.len());
    let mut refs = vec![Vec::new(); q];
    let mut sites_active = vec![Vec::new(); q];
    for (site_idx, site) in graph.sites.iter().enumerate() {
        let active_all = site.active.clone();
        let active_sampled: Vec<usize> = active_all
            .iter()
            .copied()
            .filter(|&t| !pinned_zero[t])
            .collect();
        let sampled_pos: Vec<usize> = active_all
            .iter()
            .enumerate()
            .filter(|(_, &t)| !pinned_zero[t])
            .map(|(p, _)| p)
            .collect();
        for (p, &t) in active_all.iter().enumerate() {
            refs[t].push((site_idx, p));
        }
        for &t in &active_sampled {
            sites_active[t].push(site_idx);
        }

        let nn = site.nodes.len();
        let mut m_cols = vec![vec![0.0; nn]; active_all.len()];
        let mut estimates = Vec::with_capacity(nn);
        let mut sd2 = Vec::with_capacity(nn);
        let pos_of_all = |t: usize| active_all.binary_search(&t).expect("active component");
        let pos_of_sampled = |t: usize| active_sampled.iter().position(|&u| u == t);
        let d = active_sampled.len();
        let mut lik_prec = Matrix::zeros(d, d);
        let mut nodes = Vec::with_capacity(nn);
        for (node_idx, node) in site.nodes.iter().enumerate() {
            let inv_var = 1.0 / (node.sd * node.sd);
            estimates.push(node.estimate);
            sd2.push(node.sd * node.sd);
            let mut sampled = Vec::new();
            let mut pinned = Vec::new();
            for w in &node.weights {
                if w.weight == 0.0 {
                    continue;
                }
                m_cols[pos_of_all(w.psi_index)][node_idx] = w.weight;
                match pos_of_sampled(w.psi_index) {
                    Some(pos) => sampled.push((pos, w.weight)),
                    None => pinned.push((w.psi_index, w.weight)),
                }
            }
            for &(p1, w1) in &sampled {
                for &(p2, w2) in &sampled {
                    lik_prec.set(p1, p2, lik_prec.get(p1, p2) + w1 * w2 * inv_var);
                }
            }
            nodes.push(PreparedNode {
                estimate: node.estimate,
                inv_var,
                sampled,
                pinned,
            });
        }
        sites.push(PreparedSite {
            active_all,
            active_sampled,
            sampled_pos,
            m_cols,
            estimates,
            sd2,
            nodes,
            lik_prec,
        });
    }

    // A flat prior needs likelihood: some site must reference the component.
    for t in 0..q {
        if matches!(priors.mean[t], MeanPrior::Flat) && refs[t].is_empty() {
            return Err(Error::InvalidPrior(format!(
                "flat prior on component {t} which receives no likelihood"
            )));
        }
    }

    let horseshoe = priors.horseshoe_indices();
    let horseshoe_uncoupled = graph.sites.iter().all(|site| {
        site.nodes.iter().all(|node| {
            node.weights
                .iter()
                .filter(|w| w.weight != 0.0 && horseshoe.contains(&w.psi_index))
                .count()
                <= 1
        })
    });

    Ok(Prepared {
        sites,
        refs,
        sites_active,
        horseshoe,
        horseshoe_uncoupled,
        fixed_variance,
    })
}

struct GibbsState {
    psi: Vec<f64>,
    /// Parameter-expansion slope per component (half-Cauchy scales only).
    alpha: Vec<f64>,
    /// Parameter-expansion base variance per component.
    omega2: Vec<f64>,
    /// Standardized site deviations, aligned with each site's sampled set.
    eta: Vec<Vec<f64>>,
    /// Derived site effects `psi_it = psi_t + scale_t * eta_it`.
    psi_site: Vec<Vec<f64>>,
    lambda2: Vec<f64>,
    tau2: f64,
    nu_tau: f64,
}

impl GibbsState {
    fn init(prepared: &Prepared, priors: &ResolvedPriors) -> GibbsState {
        let q = priors.n_params();
        let psi: Vec<f64> = priors
            .mean
            .iter()
            .map(|p| match p {
                MeanPrior::TruncatedNormal {
                    sign: TruncationSign::Positive,
                    ..
                } => 1.0,
                MeanPrior::TruncatedNormal {
                    sign: TruncationSign::Negative,
                    ..
                } => -1.0,
                _ => 0.0,
            })
            .collect();
        let eta: Vec<Vec<f64>> = prepared
            .sites
            .iter()
            .map(|s| vec![0.0; s.active_sampled.len()])
            .collect();
        let psi_site = prepared
            .sites
            .iter()
            .map(|s| s.active_sampled.iter().map(|&t| psi[t]).collect())
            .collect();
        GibbsState {
            psi,
            alpha: vec![1.0; q],
            omega2: vec![1.0; q],
            eta,
            psi_site,
            lambda2: vec![1.0; q],
            tau2: 1.0,
            nu_tau: 1.0,
        }
    }

    /// Site-effect scale of component `t`: `alpha_t` under the expanded
    /// half-Cauchy, `sqrt(v)` when the variance is pinned.
    fn scale_of(&self, prepared: &Prepared, t: usize) -> f64 {
        match prepared.fixed_variance[t] {
            Some(v) => v.sqrt(),
            None => self.alpha[t],
        }
    }

    /// Base variance of the standardized deviations for component `t`.
    fn base_of(&self, prepared: &Prepared, t: usize) -> f64 {
        match prepared.fixed_variance[t] {
            Some(_) => 1.0,
            None => self.omega2[t],
        }
    }

    /// Between-site variance of component `t` implied by the current state.
    fn sigma2_of(&self, prepared: &Prepared, t: usize) -> f64 {
        let scale = self.scale_of(prepared, t);
        scale * scale * self.base_of(prepared, t)
    }
}

/// Per-sweep marginal quantities for one site: `u_p = C^{-1} m_p`,
/// `g_p = m_p' u_p`, and the running residual `r = xi - M psi`.
struct SiteMarginal {
    u: Vec<Vec<f64>>,
    g: Vec<f64>,
    residual: Vec<f64>,
}

/// Runs the Gibbs sampler and returns kept draws for all parameters.
///
/// `labels[t]` names blip component `t` (for example `a*x1`); parameter
/// names in the output derive from them.
pub fn run_mcmc(
    graph: &LikelihoodGraph,
    priors: &ResolvedPriors,
    labels: &[String],
    settings: &McmcSettings,
) -> Result<PooledPosterior> {
    let q = graph.n_psi;
    if priors.n_params() != q || labels.len() != q {
        return Err(Error::InvalidPrior(format!(
            "prior/label dimension mismatch: graph has {q} components, priors {}, labels {}",
            priors.n_params(),
            labels.len()
        )));
    }
    if settings.n_chains < 2 {
        return Err(Error::InvalidPrior(
            "at least two chains are required for split R-hat".into(),
        ));
    }
    if settings.n_kept < 4 {
        return Err(Error::InvalidPrior("need at least 4 kept draws".into()));
    }

    let prepared = prepare(graph, priors)?;

    // Parameter layout: psi, sigma_psi, per-site effects, lambda, tau.
    let mut param_names: Vec<String> = labels.iter().map(|l| format!("psi[{l}]")).collect();
    param_names.extend(labels.iter().map(|l| format!("sigma_psi[{l}]")));
    for (site, block) in graph.sites.iter().zip(&prepared.sites) {
        for &t in &block.active_sampled {
            param_names.push(format!("psi_site[{}]@{}", labels[t], site.site_id));
        }
    }
    for &t in &prepared.horseshoe {
        param_names.push(format!("lambda[{}]", labels[t]));
    }
    if !prepared.horseshoe.is_empty() {
        param_names.push("tau".to_string());
    }
    let n_params = param_names.len();

    let mut chains = Vec::with_capacity(settings.n_chains);
    for chain_idx in 0..settings.n_chains {
        let mut rng = substream_rng(settings.seed, chain_idx as u64);
        let mut state = GibbsState::init(&prepared, priors);
        let mut kept = Vec::with_capacity(settings.n_kept);
        for iter in 0..settings.n_warmup + settings.n_kept {
            sweep(&prepared, priors, &mut state, &mut rng)?;
            if iter >= settings.n_warmup {
                let mut row = Vec::with_capacity(n_params);
                row.extend_from_slice(&state.psi);
                row.extend((0..q).map(|t| state.sigma2_of(&prepared, t).sqrt()));
                for block in &state.psi_site {
                    row.extend_from_slice(block);
                }
                for &t in &prepared.horseshoe {
                    row.push(state.lambda2[t].sqrt());
                }
                if !prepared.horseshoe.is_empty() {
                    row.push(state.tau2.sqrt());
                }
                kept.push(row);
            }
        }
        chains.push(kept);
    }

    Ok(PooledPosterior {
        param_names,
        labels: labels.to_vec(),
        n_psi: q,
        horseshoe: prepared.horseshoe.clone(),
        inestimable: graph.inestimable.clone(),
        chains,
        meta: ChainMeta {
            n_chains: settings.n_chains,
            n_warmup: settings.n_warmup,
            n_kept: settings.n_kept,
            seed: settings.seed,
        },
    })
}

/// Draws `lambda_t^2` from its conditional with `psi_t` integrated out,
///
/// ```text
/// p(lambda | g, lin, tau2) ~ HC(lambda; 0, 1)
///     * sqrt(pp / (pp + g)) * exp(lin^2 / (2 (pp + g))),   pp = 1/(tau2 lambda^2)
/// ```
///
/// where `(g, lin)` are the Gaussian evidence terms of `psi_t`'s marginal
/// conditional. Sampled by inverse CDF on a dense log-scale grid; the grid
/// spans twelve orders of magnitude either side, far beyond any mass the
/// half-Cauchy tail retains after the likelihood factor.
fn lambda2_marginal_draw(g: f64, lin: f64, tau2: f64, rng: &mut ChaCha8Rng) -> f64 {
    const N: usize = 320;
    const LO: f64 = -12.0;
    const HI: f64 = 12.0;
    const STEP: f64 = (HI - LO) / N as f64;
    let mut weights = [0.0f64; N];
    let mut max = f64::NEG_INFINITY;
    for (i, w) in weights.iter_mut().enumerate() {
        let x = LO + STEP * (i as f64 + 0.5);
        let lambda = x.exp();
        let pp = 1.0 / (tau2 * lambda * lambda);
        let lp = x - (1.0 + lambda * lambda).ln()
            + 0.5 * (pp.ln() - (pp + g).ln())
            + lin * lin / (2.0 * (pp + g));
        *w = lp;
        if lp > max {
            max = lp;
        }
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    let mut target = rng.gen::<f64>() * total;
    let mut idx = N - 1;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            idx = i;
            break;
        }
        target -= *w;
    }
    let frac: f64 = rng.gen();
    let x = LO + STEP * (idx as f64 + frac);
    (2.0 * x).exp()
}

/// Draws `tau^2` from its conditional with every horseshoe mean integrated
/// out (valid when no row couples two horseshoe components):
///
/// ```text
/// p(tau | ...) ~ HC(tau; 0, 1) * prod_t sqrt(pp_t/(pp_t + g_t))
///     * exp(lin_t^2 / (2 (pp_t + g_t))),   pp_t = 1/(tau^2 lambda_t^2)
/// ```
fn tau2_marginal_draw(evidence: &[(f64, f64, f64)], rng: &mut ChaCha8Rng) -> f64 {
    const N: usize = 320;
    const LO: f64 = -12.0;
    const HI: f64 = 12.0;
    const STEP: f64 = (HI - LO) / N as f64;
    let mut weights = [0.0f64; N];
    let mut max = f64::NEG_INFINITY;
    for (i, w) in weights.iter_mut().enumerate() {
        let x = LO + STEP * (i as f64 + 0.5);
        let tau = x.exp();
        let mut lp = x - (1.0 + tau * tau).ln();
        for &(lambda2, g, lin) in evidence {
            let pp = 1.0 / (tau * tau * lambda2);
            lp += 0.5 * (pp.ln() - (pp + g).ln()) + lin * lin / (2.0 * (pp + g));
        }
        *w = lp;
        if lp > max {
            max = lp;
        }
    }
    let mut total = 0.0;
    for w in weights.iter_mut() {
        *w = (*w - max).exp();
        total += *w;
    }
    let mut target = rng.gen::<f64>() * total;
    let mut idx = N - 1;
    for (i, w) in weights.iter().enumerate() {
        if target < *w {
            idx = i;
            break;
        }
        target -= *w;
    }
    let frac: f64 = rng.gen();
    let x = LO + STEP * (idx as f64 + frac);
    (2.0 * x).exp()
}

/// Gaussian evidence `(g, lin)` for one component, summed over its sites.
fn component_evidence(
    prepared: &Prepared,
    marginals: &[SiteMarginal],
    psi_t: f64,
    t: usize,
) -> (f64, f64) {
    let mut g_sum = 0.0;
    let mut lin_sum = 0.0;
    for &(site_idx, p) in &prepared.refs[t] {
        let m = &marginals[site_idx];
        g_sum += m.g[p];
        lin_sum += dot(&m.u[p], &m.residual) + m.g[p] * psi_t;
    }
    (g_sum, lin_sum)
}

fn sweep(
    prepared: &Prepared,
    priors: &ResolvedPriors,
    state: &mut GibbsState,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let q = state.psi.len();

    // (a) Per-site marginal quantities at the current variances.
    let mut marginals = Vec::with_capacity(prepared.sites.len());
    for site in &prepared.sites {
        let nn = site.estimates.len();
        let mut cov = Matrix::zeros(nn, nn);
        for i in 0..nn {
            cov.set(i, i, site.sd2[i]);
        }
        for &p in &site.sampled_pos {
            let s2 = state.sigma2_of(prepared, site.active_all[p]);
            if s2 == 0.0 {
                continue;
            }
            let col = &site.m_cols[p];
            for r1 in 0..nn {
                if col[r1] == 0.0 {
                    continue;
                }
                for r2 in 0..nn {
                    cov.set(r1, r2, cov.get(r1, r2) + s2 * col[r1] * col[r2]);
                }
            }
        }
        let chol = Cholesky::decompose(&cov).ok_or(Error::NonPositiveDefinite {
            context: "site marginal covariance".into(),
        })?;
        let mut u = Vec::with_capacity(site.active_all.len());
        let mut g = Vec::with_capacity(site.active_all.len());
        for col in &site.m_cols {
            let ui = chol.solve(col);
            g.push(dot(col, &ui));
            u.push(ui);
        }
        let mut residual = site.estimates.clone();
        for (p, &t) in site.active_all.iter().enumerate() {
            let psi_t = state.psi[t];
            if psi_t != 0.0 {
                for (res, m) in residual.iter_mut().zip(&site.m_cols[p]) {
                    *res -= m * psi_t;
                }
            }
        }
        marginals.push(SiteMarginal { u, g, residual });
    }

    // (b0) Horseshoe global scale from its fully-integrated conditional
    // when the components are uncoupled; the means are redrawn right after.
    if prepared.horseshoe_uncoupled && !prepared.horseshoe.is_empty() {
        let evidence: Vec<(f64, f64, f64)> = prepared
            .horseshoe
            .iter()
            .map(|&t| {
                let (g, lin) = component_evidence(prepared, &marginals, state.psi[t], t);
                (state.lambda2[t], g, lin)
            })
            .collect();
        state.tau2 = tau2_marginal_draw(&evidence, rng);
    }

    // (b) Common means, componentwise from the marginal conditionals. A
    // horseshoe component first redraws its local scale from the exact
    // psi-integrated conditional, so the (lambda, psi) pair moves jointly.
    for t in 0..q {
        let contributions: Vec<(f64, f64)> = prepared.refs[t]
            .iter()
            .map(|&(site_idx, p)| {
                let m = &marginals[site_idx];
                let g = m.g[p];
                let lin = dot(&m.u[p], &m.residual) + g * state.psi[t];
                (g, lin)
            })
            .collect();
        let (prior_precision, truncation) = match priors.mean[t] {
            MeanPrior::Flat => (0.0, None),
            MeanPrior::Normal { variance } => (1.0 / variance, None),
            MeanPrior::TruncatedNormal { variance, sign } => (1.0 / variance, Some(sign)),
            MeanPrior::Horseshoe => {
                let g_sum: f64 = contributions.iter().map(|c| c.0).sum();
                let lin_sum: f64 = contributions.iter().map(|c| c.1).sum();
                state.lambda2[t] = lambda2_marginal_draw(g_sum, lin_sum, state.tau2, rng);
                (1.0 / (state.tau2 * state.lambda2[t]), None)
            }
        };
        let cond = conditionals::common_mean_marginal(prior_precision, &contributions);
        let new = match truncation {
            Some(sign) => cond.draw_truncated(sign, rng),
            None => cond.draw(rng),
        };
        let delta = new - state.psi[t];
        if delta != 0.0 {
            for &(site_idx, p) in &prepared.refs[t] {
                let site = &prepared.sites[site_idx];
                let residual = &mut marginals[site_idx].residual;
                for (res, m) in residual.iter_mut().zip(&site.m_cols[p]) {
                    *res -= m * delta;
                }
            }
        }
        state.psi[t] = new;
    }

    // (c) Standardized site-deviation blocks, redrawn given the fresh
    // common means: eta_i ~ N over the sampled components, with the site
    // effects derived as psi_it = psi_t + scale_t * eta_it.
    for (site_idx, site) in prepared.sites.iter().enumerate() {
        let d = site.active_sampled.len();
        if d == 0 {
            continue;
        }
        let scales: Vec<f64> = site
            .active_sampled
            .iter()
            .map(|&t| state.scale_of(prepared, t))
            .collect();
        let bases: Vec<f64> = site
            .active_sampled
            .iter()
            .map(|&t| state.base_of(prepared, t))
            .collect();
        let mut b = vec![0.0; d];
        for node in &site.nodes {
            let mut adjusted = node.estimate;
            for &(t, w) in &node.pinned {
                adjusted -= w * state.psi[t];
            }
            for &(pos, w) in &node.sampled {
                adjusted -= w * state.psi[site.active_sampled[pos]];
            }
            for &(pos, w) in &node.sampled {
                b[pos] += w * scales[pos] * adjusted * node.inv_var;
            }
        }
        let mut prec = Matrix::zeros(d, d);
        for r in 0..d {
            for c in 0..d {
                prec.set(r, c, site.lik_prec.get(r, c) * scales[r] * scales[c]);
            }
        }
        for j in 0..d {
            prec.set(j, j, prec.get(j, j) + 1.0 / bases[j]);
        }
        let (draw, _) =
            mvn_draw_from_precision(&prec, &b, rng).ok_or(Error::NonPositiveDefinite {
                context: format!("site deviation block {site_idx}"),
            })?;
        for (pos, &t) in site.active_sampled.iter().enumerate() {
            state.psi_site[site_idx][pos] = state.psi[t] + scales[pos] * draw[pos];
        }
        state.eta[site_idx] = draw;
    }

    // (d) Expanded half-Cauchy scales: a Gaussian draw for the slope
    // alpha_t given the standardized deviations, then inverse-gamma for the
    // base variance omega_t^2.
    let mut residuals: Vec<Vec<f64>> = prepared
        .sites
        .iter()
        .enumerate()
        .map(|(i, site)| {
            site.nodes
                .iter()
                .map(|node| {
                    let mut r = node.estimate;
                    for &(t, w) in &node.pinned {
                        r -= w * state.psi[t];
                    }
                    for &(pos, w) in &node.sampled {
                        r -= w * state.psi_site[i][pos];
                    }
                    r
                })
                .collect()
        })
        .collect();
    for t in 0..q {
        let VariancePrior::HalfCauchy { scale } = priors.variance[t] else {
            continue;
        };
        let mut terms = Vec::new();
        let mut touched: Vec<(usize, usize, f64)> = Vec::new();
        for &site_idx in &prepared.sites_active[t] {
            let site = &prepared.sites[site_idx];
            let pos = site
                .active_sampled
                .iter()
                .position(|&u| u == t)
                .expect("active bookkeeping");
            let eta_it = state.eta[site_idx][pos];
            for (node_idx, node) in site.nodes.iter().enumerate() {
                let Some(&(_, w)) = node.sampled.iter().find(|&&(p, _)| p == pos) else {
                    continue;
                };
                let k = w * eta_it;
                let residual_excl = residuals[site_idx][node_idx] + k * state.alpha[t];
                terms.push((k, residual_excl, node.inv_var));
                touched.push((site_idx, node_idx, k));
            }
        }
        let cond = conditionals::px_slope(1.0 / (scale * scale), &terms);
        let new_alpha = cond.draw(rng);
        let delta = new_alpha - state.alpha[t];
        if delta != 0.0 {
            for &(site_idx, node_idx, k) in &touched {
                residuals[site_idx][node_idx] -= k * delta;
            }
            for &site_idx in &prepared.sites_active[t] {
                let site = &prepared.sites[site_idx];
                let pos = site
                    .active_sampled
                    .iter()
                    .position(|&u| u == t)
                    .expect("active bookkeeping");
                state.psi_site[site_idx][pos] =
                    state.psi[t] + new_alpha * state.eta[site_idx][pos];
            }
        }
        state.alpha[t] = new_alpha;

        let n_t = prepared.sites_active[t].len();
        let sum_eta_sq: f64 = prepared.sites_active[t]
            .iter()
            .map(|&site_idx| {
                let site = &prepared.sites[site_idx];
                let pos = site
                    .active_sampled
                    .iter()
                    .position(|&u| u == t)
                    .expect("active bookkeeping");
                let e = state.eta[site_idx][pos];
                e * e
            })
            .sum();
        let (shape, rate) = conditionals::px_base_variance(n_t, sum_eta_sq);
        state.omega2[t] = inverse_gamma_draw(shape, rate, rng);
    }

    // (e) Horseshoe global scale via the conjugate mixture when rows couple
    // horseshoe components (the locals were redrawn alongside their means).
    if !prepared.horseshoe.is_empty() && !prepared.horseshoe_uncoupled {
        let sum_ratio: f64 = prepared
            .horseshoe
            .iter()
            .map(|&t| state.psi[t] * state.psi[t] / state.lambda2[t])
            .sum();
        let (shape, rate) =
            conditionals::global_shrinkage(prepared.horseshoe.len(), sum_ratio, state.nu_tau);
        state.tau2 = inverse_gamma_draw(shape, rate, rng);
        let (a_shape, a_rate) = conditionals::half_cauchy_aux(1.0, state.tau2);
        state.nu_tau = inverse_gamma_draw(a_shape, a_rate, rng);
    }

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::graph::assemble_likelihood;
    use super::super::posterior::select_interactions;
    use super::super::priors::PriorConfig;
    use super::*;
    use crate::federation::{MapWeight, SiteSummary, SummaryEntry, PROTOCOL_VERSION};
    use crate::mcmc::{mean, median, quantile, sample_sd};
    use statrs::distribution::{Continuous, ContinuousCDF, Normal as NormalDist};

    fn summary(site_id: &str, entries: Vec<(&str, f64, f64, Vec<(usize, f64)>)>) -> SiteSummary {
        SiteSummary {
            protocol_version: PROTOCOL_VERSION,
            site_id: site_id.into(),
            model_fingerprint: "fp".into(),
            n_obs: 100,
            dof: 95,
            entries: entries
                .into_iter()
                .map(|(label, estimate, sd, row)| SummaryEntry {
                    label: label.into(),
                    estimate,
                    sd,
                    map_row: row
                        .into_iter()
                        .map(|(psi_index, weight)| MapWeight { psi_index, weight })
                        .collect(),
                })
                .collect(),
        }
    }

    fn labels(n: usize) -> Vec<String> {
        (0..n).map(|t| format!("a*x{t}")).collect()
    }

    /// Two identity sites, between-site variance pinned at zero, flat prior:
    /// the posterior of psi is exactly N(2, 1/2).
    #[test]
    fn precision_weighting_identity() {
        let summaries = vec![
            summary("s1", vec![("a*x0", 1.0, 1.0, vec![(0, 1.0)])]),
            summary("s2", vec![("a*x0", 3.0, 1.0, vec![(0, 1.0)])]),
        ];
        let graph = assemble_likelihood(&summaries, 1).unwrap();
        let priors = ResolvedPriors {
            mean: vec![MeanPrior::Flat],
            variance: vec![VariancePrior::Fixed { value: 0.0 }],
        };
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 200,
            n_kept: 1000,
            seed: 11,
        };
        let posterior = run_mcmc(&graph, &priors, &labels(1), &settings).unwrap();
        let draws = posterior.draws(0);
        let n = draws.len() as f64;
        let mc_se = (0.5f64).sqrt() / n.sqrt();
        assert!((mean(&draws) - 2.0).abs() < 3.0 * mc_se, "mean {}", mean(&draws));
        let sd = sample_sd(&draws);
        assert!((sd - 0.5f64.sqrt()).abs() / 0.5f64.sqrt() < 0.05, "sd {sd}");
    }

    /// Single site, single component, everything else known: the marginal
    /// posterior of psi follows the closed-form normal-normal update with
    /// total variance sd^2 + sigma2.
    #[test]
    fn single_site_matches_conjugate_formula() {
        let (est, sd, sigma2, prior_var) = (1.5, 0.5, 0.09, 4.0);
        let summaries = vec![summary("s1", vec![("a*x0", est, sd, vec![(0, 1.0)])])];
        let graph = assemble_likelihood(&summaries, 1).unwrap();
        let priors = ResolvedPriors {
            mean: vec![MeanPrior::Normal { variance: prior_var }],
            variance: vec![VariancePrior::Fixed { value: sigma2 }],
        };
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 500,
            n_kept: 4000,
            seed: 5,
        };
        let posterior = run_mcmc(&graph, &priors, &labels(1), &settings).unwrap();

        let total_var = sd * sd + sigma2;
        let prec = 1.0 / prior_var + 1.0 / total_var;
        let expected_mean = (est / total_var) / prec;
        let expected_sd = prec.recip().sqrt();
        let draws = posterior.draws(0);
        // Gibbs draws autocorrelate; allow a generous effective-sample factor.
        let mc_se = expected_sd / (draws.len() as f64 / 10.0).sqrt();
        assert!(
            (mean(&draws) - expected_mean).abs() < 4.0 * mc_se,
            "mean {} vs {expected_mean}",
            mean(&draws)
        );
        let sd_draws = sample_sd(&draws);
        assert!(
            (sd_draws - expected_sd).abs() / expected_sd < 0.1,
            "sd {sd_draws} vs {expected_sd}"
        );
    }

    /// Every conjugate full conditional agrees with an independently derived
    /// closed form on frozen conditioning values, to 1e-12.
    #[test]
    fn full_conditional_formulas_are_exact() {
        // Common mean, hierarchical: prior N(0, 25), 3 sites, sigma2 = 0.49.
        let cond = conditionals::common_mean_hierarchical(1.0 / 25.0, 3, 1.2 + 0.7 - 0.4, 0.49);
        let prec = 1.0 / 25.0 + 3.0 / 0.49;
        assert!((cond.mean - (1.5 / 0.49) / prec).abs() < 1e-12);
        assert!((cond.sd - prec.recip().sqrt()).abs() < 1e-12);

        // Common mean, marginal: hand-computed for one site with a single
        // identity node (C = sd^2 + sigma^2 scalar) plus one pinned node.
        let (sd2, sigma2, xi, psi_cur) = (0.25, 0.36, 1.4, 0.2);
        let g = 1.0 / (sd2 + sigma2);
        let lin = (xi - psi_cur) / (sd2 + sigma2) + g * psi_cur;
        let cond = conditionals::common_mean_marginal(0.1, &[(g, lin)]);
        let prec = 0.1 + g;
        assert!((cond.mean - (xi / (sd2 + sigma2)) / prec).abs() < 1e-12);
        assert!((cond.sd - prec.recip().sqrt()).abs() < 1e-12);

        // Between-site variance: 4 sites, ss = 0.6, nu = 2.
        let (shape, rate) = conditionals::between_variance(4, 0.6, 2.0);
        assert!((shape - 2.5).abs() < 1e-12);
        assert!((rate - (0.5 + 0.3)).abs() < 1e-12);

        // Half-Cauchy auxiliary with scale 10.
        let (shape, rate) = conditionals::half_cauchy_aux(10.0, 0.7);
        assert!((shape - 1.0).abs() < 1e-12);
        assert!((rate - (0.01 + 1.0 / 0.7)).abs() < 1e-12);

        // Parameter-expanded slope and base variance.
        let cond = conditionals::px_slope(0.25, &[(0.8, 1.2, 4.0), (-0.5, 0.4, 2.0)]);
        let prec = 0.25 + 0.64 * 4.0 + 0.25 * 2.0;
        let wsum = 0.8 * 1.2 * 4.0 + (-0.5) * 0.4 * 2.0;
        assert!((cond.mean - wsum / prec).abs() < 1e-12);
        assert!((cond.sd - prec.recip().sqrt()).abs() < 1e-12);
        let (shape, rate) = conditionals::px_base_variance(7, 3.6);
        assert!((shape - 4.0).abs() < 1e-12);
        assert!((rate - (0.5 + 1.8)).abs() < 1e-12);

        // Horseshoe local and global scales.
        let (shape, rate) = conditionals::local_shrinkage(0.4, 2.0, 1.5);
        assert!((shape - 1.0).abs() < 1e-12);
        assert!((rate - (1.0 / 1.5 + 0.16 / 4.0)).abs() < 1e-12);
        let (shape, rate) = conditionals::global_shrinkage(8, 3.2, 0.9);
        assert!((shape - 4.5).abs() < 1e-12);
        assert!((rate - (1.0 / 0.9 + 1.6)).abs() < 1e-12);

        // Site block: likelihood Gram plus hierarchical diagonal.
        let lik = Matrix::from_rows(2, 2, vec![4.0, 1.0, 1.0, 2.0]);
        let (prec, b) = conditionals::site_block(&lik, &[0.5, -0.2], &[0.25, 0.5], &[1.0, -1.0]);
        assert!((prec.get(0, 0) - 8.0).abs() < 1e-12);
        assert!((prec.get(1, 1) - 4.0).abs() < 1e-12);
        assert!((prec.get(0, 1) - 1.0).abs() < 1e-12);
        assert!((b[0] - (0.5 + 4.0)).abs() < 1e-12);
        assert!((b[1] - (-0.2 - 2.0)).abs() < 1e-12);
    }

    fn moment_check(draws: &[f64], true_mean: f64, true_var: f64, label: &str) {
        let n = draws.len() as f64;
        let m = mean(draws);
        let z = (m - true_mean) / (true_var / n).sqrt();
        assert!(z.abs() < 4.0, "{label}: mean z-score {z} ({m} vs {true_mean})");
        let v = sample_sd(draws).powi(2);
        assert!(
            (v - true_var).abs() / true_var < 0.1,
            "{label}: var {v} vs {true_var}"
        );
    }

    /// Distributional check of every Gibbs draw against the moments implied
    /// by its closed-form full conditional, 50k draws each.
    #[test]
    fn full_conditional_draws_match_their_moments() {
        let n = 50_000;
        let mut rng = substream_rng(1234, 0);

        // Gaussian conditional.
        let cond = conditionals::common_mean_hierarchical(0.1, 5, 2.5, 0.8);
        let draws: Vec<f64> = (0..n).map(|_| cond.draw(&mut rng)).collect();
        moment_check(&draws, cond.mean, cond.sd * cond.sd, "gaussian");

        // Truncated Gaussian against Mills-ratio moments.
        let normal = NormalDist::new(0.0, 1.0).unwrap();
        for (mu, sd) in [(0.5, 1.0), (-2.0, 0.7), (3.0, 2.0)] {
            let alpha = (0.0 - mu) / sd;
            let lambda = normal.pdf(alpha) / (1.0 - normal.cdf(alpha));
            let tmean = mu + sd * lambda;
            let tvar = sd * sd * (1.0 + alpha * lambda - lambda * lambda);
            let draws: Vec<f64> = (0..n)
                .map(|_| {
                    crate::mcmc::truncated_normal_draw(
                        mu,
                        sd,
                        TruncationSign::Positive,
                        &mut rng,
                    )
                })
                .collect();
            assert!(draws.iter().all(|&d| d > 0.0));
            moment_check(&draws, tmean, tvar, &format!("truncated mu={mu}"));
        }

        // Inverse-gamma conditionals, checked on the reciprocal scale where
        // the Gamma moments are finite for every shape that arises.
        for (shape, rate, label) in [
            conditionals::between_variance(6, 0.9, 1.3),
            conditionals::px_base_variance(6, 2.4),
            conditionals::local_shrinkage(0.4, 2.0, 1.5),
            conditionals::global_shrinkage(8, 3.2, 0.9),
        ]
        .iter()
        .map(|&(s, r)| (s, r, "inv-gamma"))
        {
            let recips: Vec<f64> = (0..n)
                .map(|_| 1.0 / inverse_gamma_draw(shape, rate, &mut rng))
                .collect();
            moment_check(&recips, shape / rate, shape / (rate * rate), label);
        }

        // MVN block draw: mean P^{-1} b, covariance P^{-1}.
        let prec = Matrix::from_rows(2, 2, vec![5.0, 1.5, 1.5, 3.0]);
        let b = vec![1.0, -0.5];
        let det = 5.0 * 3.0 - 1.5 * 1.5;
        let cov = [
            [3.0 / det, -1.5 / det],
            [-1.5 / det, 5.0 / det],
        ];
        let mu = [
            cov[0][0] * b[0] + cov[0][1] * b[1],
            cov[1][0] * b[0] + cov[1][1] * b[1],
        ];
        let mut d0 = Vec::with_capacity(n);
        let mut d1 = Vec::with_capacity(n);
        for _ in 0..n {
            let (draw, cond_mean) = mvn_draw_from_precision(&prec, &b, &mut rng).unwrap();
            assert!((cond_mean[0] - mu[0]).abs() < 1e-12);
            assert!((cond_mean[1] - mu[1]).abs() < 1e-12);
            d0.push(draw[0]);
            d1.push(draw[1]);
        }
        moment_check(&d0, mu[0], cov[0][0], "mvn[0]");
        moment_check(&d1, mu[1], cov[1][1], "mvn[1]");
    }

    fn ks_distance<F: Fn(f64) -> f64>(draws: &[f64], cdf: F) -> f64 {
        let mut sorted = draws.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = sorted.len() as f64;
        sorted
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                let lo = i as f64 / n;
                let hi = (i + 1) as f64 / n;
                (f - lo).abs().max((hi - f).abs())
            })
            .fold(0.0, f64::max)
    }

    /// With zero sites the sampler must reproduce the priors: normal for the
    /// mean, half-Cauchy for the between-site SD.
    #[test]
    fn prior_only_model_reproduces_the_prior() {
        let graph = assemble_likelihood(&[], 1).unwrap();
        assert_eq!(graph.inestimable, vec![0]);
        let priors = ResolvedPriors {
            mean: vec![MeanPrior::Normal { variance: 4.0 }],
            variance: vec![VariancePrior::HalfCauchy { scale: 1.0 }],
        };
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 100,
            n_kept: 5000,
            seed: 99,
        };
        let posterior = run_mcmc(&graph, &priors, &labels(1), &settings).unwrap();

        let normal = NormalDist::new(0.0, 2.0).unwrap();
        let d_mean = ks_distance(&posterior.draws(0), |x| normal.cdf(x));
        assert!(d_mean < 0.05, "KS distance for the mean prior: {d_mean}");

        let sigma_draws = posterior.draws(1);
        assert!(sigma_draws.iter().all(|&s| s > 0.0));
        let d_sigma = ks_distance(&sigma_draws, |x| {
            2.0 / std::f64::consts::PI * x.atan()
        });
        assert!(d_sigma < 0.05, "KS distance for the SD prior: {d_sigma}");
    }

    /// Shifting every estimate of an identity-mapped component by delta
    /// shifts its posterior mean by delta (fixed-variance closed form).
    #[test]
    fn likelihood_location_equivariance() {
        let delta = 2.75;
        let base = [0.4, 1.3, -0.6];
        let build = |shift: f64| {
            let summaries: Vec<SiteSummary> = base
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    summary(
                        &format!("s{i}"),
                        vec![("a*x0", e + shift, 0.8, vec![(0, 1.0)])],
                    )
                })
                .collect();
            assemble_likelihood(&summaries, 1).unwrap()
        };
        let priors = ResolvedPriors {
            mean: vec![MeanPrior::Flat],
            variance: vec![VariancePrior::Fixed { value: 0.0 }],
        };
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 200,
            n_kept: 2000,
            seed: 3,
        };
        let m0 = run_mcmc(&build(0.0), &priors, &labels(1), &settings)
            .unwrap()
            .mean(0);
        let m1 = run_mcmc(&build(delta), &priors, &labels(1), &settings)
            .unwrap()
            .mean(0);
        let mc_se = (0.8 * 0.8 / 3.0f64).sqrt() / (4000.0f64 / 1.0).sqrt();
        assert!(
            ((m1 - m0) - delta).abs() < 4.0 * 1.5 * mc_se,
            "shift {} vs {delta}",
            m1 - m0
        );
    }

    #[test]
    fn truncated_means_respect_their_sign_in_every_kept_draw() {
        let summaries = vec![
            summary("s1", vec![("a*x0", -0.2, 0.5, vec![(0, 1.0)])]),
            summary("s2", vec![("a*x0", 0.1, 0.5, vec![(0, 1.0)])]),
        ];
        let graph = assemble_likelihood(&summaries, 1).unwrap();
        let priors = ResolvedPriors {
            mean: vec![MeanPrior::TruncatedNormal {
                variance: 100.0,
                sign: TruncationSign::Positive,
            }],
            variance: vec![VariancePrior::HalfCauchy { scale: 1.0 }],
        };
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 300,
            n_kept: 1500,
            seed: 21,
        };
        let posterior = run_mcmc(&graph, &priors, &labels(1), &settings).unwrap();
        assert!(posterior.draws(0).iter().all(|&v| v > 0.0));
    }

    #[test]
    fn runs_are_deterministic_given_the_seed() {
        let summaries = vec![
            summary("s1", vec![("a*x0", 1.0, 0.5, vec![(0, 1.0)])]),
            summary("s2", vec![("a*x0", 2.0, 0.5, vec![(0, 1.0)])]),
        ];
        let graph = assemble_likelihood(&summaries, 1).unwrap();
        let priors = ResolvedPriors {
            mean: vec![MeanPrior::Normal { variance: 100.0 }],
            variance: vec![VariancePrior::HalfCauchy { scale: 1.0 }],
        };
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 50,
            n_kept: 50,
            seed: 77,
        };
        let p1 = run_mcmc(&graph, &priors, &labels(1), &settings).unwrap();
        let p2 = run_mcmc(&graph, &priors, &labels(1), &settings).unwrap();
        assert_eq!(p1.chains, p2.chains);
        let p3 = run_mcmc(
            &graph,
            &priors,
            &labels(1),
            &McmcSettings { seed: 78, ..settings },
        )
        .unwrap();
        assert_ne!(p1.chains, p3.chains);
    }

    /// Sparse-pattern rows: a site transmitting (psi0+psi1+psi3) and
    /// (psi2-psi3) nodes gets site effects for all four components, while an
    /// identity site missing a component gets none for it.
    #[test]
    fn map_rows_drive_site_effect_creation() {
        let summaries = vec![
            summary(
                "s3",
                vec![
                    ("a*intercept", 4.0, 0.4, vec![(0, 1.0), (1, 1.0), (3, 1.0)]),
                    ("a*x2:2", -0.5, 0.6, vec![(2, 1.0), (3, -1.0)]),
                ],
            ),
            summary(
                "s1",
                vec![
                    ("a*intercept", 1.0, 0.5, vec![(0, 1.0)]),
                    ("a*x2:3", 2.0, 0.7, vec![(3, 1.0)]),
                ],
            ),
        ];
        let graph = assemble_likelihood(&summaries, 4).unwrap();
        let priors = PriorConfig::default()
            .resolve(&labels(4))
            .unwrap();
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 50,
            n_kept: 50,
            seed: 1,
        };
        let posterior = run_mcmc(&graph, &priors, &labels(4), &settings).unwrap();
        assert!(posterior
            .param_names
            .contains(&"psi_site[a*x1]@s3".to_string()));
        assert!(!posterior
            .param_names
            .iter()
            .any(|n| n == "psi_site[a*x1]@s1" || n == "psi_site[a*x2]@s1"));
    }

    #[test]
    fn selection_uses_equal_tailed_intervals_over_horseshoe_components() {
        // Component 1 far from zero, component 2 straddling zero.
        let summaries: Vec<SiteSummary> = (0..6)
            .map(|i| {
                summary(
                    &format!("s{i}"),
                    vec![
                        ("a*x0", 1.0, 0.3, vec![(0, 1.0)]),
                        ("a*x1", 2.0 + 0.05 * i as f64, 0.2, vec![(1, 1.0)]),
                        ("a*x2", 0.02 * (i as f64 - 2.5), 0.5, vec![(2, 1.0)]),
                    ],
                )
            })
            .collect();
        let graph = assemble_likelihood(&summaries, 3).unwrap();
        let priors = ResolvedPriors {
            mean: vec![
                MeanPrior::Normal { variance: 10_000.0 },
                MeanPrior::Horseshoe,
                MeanPrior::Horseshoe,
            ],
            variance: vec![VariancePrior::HalfCauchy { scale: 1.0 }; 3],
        };
        let settings = McmcSettings {
            n_chains: 2,
            n_warmup: 500,
            n_kept: 1000,
            seed: 8,
        };
        let posterior = run_mcmc(&graph, &priors, &labels(3), &settings).unwrap();
        let selected = select_interactions(&posterior, 0.95);
        assert!(selected.contains(&1), "strong effect must be selected");
        assert!(!selected.contains(&2), "null effect must not be selected");
        assert!(!selected.contains(&0), "non-horseshoe is never selectable");
        // All shrinkage draws positive.
        let tau_idx = posterior.param_index("tau").unwrap();
        assert!(posterior.draws(tau_idx).iter().all(|&v| v > 0.0));
        // Median/quantile sanity for the strong component.
        let draws = posterior.draws(1);
        assert!(quantile(&draws, 0.025) > 0.0);
        assert!(median(&draws) > 1.5);
    }
}
