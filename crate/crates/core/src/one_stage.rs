//! One-stage comparator: the full-data hierarchical regression.
//!
//! Fitted on all individual-level data at once,
//!
//! ```text
//! Y_ij    ~ N( beta_i' x_tf + a psi_i' x_blip [+ a^2 ...], sigma_i^2 )
//! beta_is ~ N(beta_s, sigma_beta_s^2)
//! psi_it  ~ N(psi_t,  sigma_psi_t^2)
//! ```
//!
//! with vague priors on the common levels and half-Cauchy mixtures on every
//! scale. This is not the privacy-preserving path; it exists to validate
//! that the two-stage pooling of summaries recovers essentially the same
//! blip posterior.
//!
//! Rank-deficient sites are handled exactly as in the two-stage path: the
//! site's regression runs on its retained columns, and those coefficients
//! are tied to the site's present global parameters through the same
//! reparametrization algebra, so each site contributes likelihood only on
//! what it can estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mcmc::{
    inverse_gamma_draw, mvn_draw_from_precision, substream_rng, TruncationSign,
};
use crate::model::{build_design_matrix, ModelSpec, SiteDataset};
use crate::sparsity::{derive_reparam, derive_treatment_free_map, scan_sparsity};
use crate::stage_one::{detect_estimable, RANK_TOLERANCE};
use crate::stage_two::{
    conditionals, ChainMeta, McmcSettings, MeanPrior, PooledPosterior, PriorConfig,
    VariancePrior,
};

/// Priors for the one-stage model: the blip block reuses the pooling
/// configuration; the treatment-free level and residual scales get their own.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneStagePriors {
    pub psi: PriorConfig,
    /// Prior on each common treatment-free level (normal or flat).
    pub beta_mean: MeanPrior,
    pub beta_variance: VariancePrior,
    /// Half-Cauchy scale for the residual SDs `sigma_i`.
    pub residual_scale: f64,
    /// Pins every residual variance to a constant instead of sampling it.
    #[serde(default)]
    pub residual_fixed: Option<f64>,
}

impl Default for OneStagePriors {
    fn default() -> Self {
        OneStagePriors {
            psi: PriorConfig::default(),
            beta_mean: MeanPrior::Normal { variance: 10_000.0 },
            beta_variance: VariancePrior::HalfCauchy { scale: 1.0 },
            residual_scale: 1.0,
            residual_fixed: None,
        }
    }
}

/// The full-data model: specification, every site's raw data, and priors.
#[derive(Debug, Clone)]
pub struct OneStageModel {
    pub spec: ModelSpec,
    pub datasets: Vec<SiteDataset>,
    pub priors: OneStagePriors,
}

struct PreparedSite {
    site_id: String,
    n_obs: usize,
    /// Global parameter index per effective-design column: treatment-free
    /// positions first, then blip indices offset by `p`.
    params: Vec<usize>,
    gram: Matrix,
    gty: Vec<f64>,
    yty: f64,
}

fn prepare_site(spec: &ModelSpec, data: &SiteDataset) -> Result<PreparedSite> {
    let design = build_design_matrix(spec, data)?;
    let estimable = detect_estimable(&design.matrix, RANK_TOLERANCE)?;
    let scan = scan_sparsity(spec, data)?;
    let tf_rows = derive_treatment_free_map(spec, &design, &estimable, &scan)?;
    let blip_map = derive_reparam(spec, &design, &estimable, &scan)?;
    let p = spec.n_treatment_free();

    // Present global parameters, in (treatment-free, then blip) order.
    let mut params: Vec<usize> = Vec::new();
    let mut row_weights: Vec<(usize, Vec<(usize, f64)>)> = Vec::new();
    for row in tf_rows.iter() {
        for w in &row.weights {
            if !params.contains(&w.psi_index) {
                params.push(w.psi_index);
            }
        }
        row_weights.push((
            row.column,
            row.weights.iter().map(|w| (w.psi_index, w.weight)).collect(),
        ));
    }
    let n_tf_params = {
        params.sort_unstable();
        params.len()
    };
    let mut blip_params: Vec<usize> = Vec::new();
    for row in blip_map.rows.iter() {
        for w in &row.weights {
            if !blip_params.contains(&w.psi_index) {
                blip_params.push(w.psi_index);
            }
        }
        row_weights.push((
            row.column,
            row.weights
                .iter()
                .map(|w| (p + w.psi_index, w.weight))
                .collect(),
        ));
    }
    blip_params.sort_unstable();
    params.extend(blip_params.iter().map(|&t| p + t));

    // Effective design: column j of G carries the data column of each
    // retained coefficient, weighted into the present global parameters.
    let n = design.n_obs();
    let d = params.len();
    let mut g = Matrix::zeros(n, d);
    for (col, weights) in &row_weights {
        for &(param, w) in weights {
            let j = params.iter().position(|&q| q == param).expect("present");
            for r in 0..n {
                g.set(r, j, g.get(r, j) + w * design.matrix.get(r, *col));
            }
        }
    }
    debug_assert!(n_tf_params <= d);

    let gram = g.gram();
    let gty = g.transpose_mul_vec(&data.outcome);
    let yty = data.outcome.iter().map(|y| y * y).sum();
    Ok(PreparedSite {
        site_id: data.site_id.clone(),
        n_obs: n,
        params,
        gram,
        gty,
        yty,
    })
}

/// Runs the one-stage Gibbs sampler. The output container matches the
/// pooling sampler's layout for the blip block (`psi`, then `sigma_psi`), so
/// the two paths are directly comparable; treatment-free levels, their
/// scales, residual SDs, and per-site coefficients follow.
pub fn run_onestage(model: &OneStageModel, settings: &McmcSettings) -> Result<PooledPosterior> {
    let spec = &model.spec;
    spec.validate()?;
    let p = spec.n_treatment_free();
    let q = spec.n_blip();
    let labels = spec.psi_labels();
    let psi_priors = model.priors.psi.resolve(&labels)?;
    if settings.n_chains < 2 {
        return Err(Error::InvalidPrior(
            "at least two chains are required for split R-hat".into(),
        ));
    }
    for v in psi_priors
        .variance
        .iter()
        .chain(std::iter::once(&model.priors.beta_variance))
    {
        if matches!(v, VariancePrior::Fixed { value } if *value == 0.0) {
            return Err(Error::InvalidPrior(
                "the one-stage model does not support a zero between-site variance".into(),
            ));
        }
    }
    match model.priors.beta_mean {
        MeanPrior::Flat | MeanPrior::Normal { .. } => {}
        _ => {
            return Err(Error::InvalidPrior(
                "treatment-free levels take flat or normal priors".into(),
            ))
        }
    }
    if !(model.priors.residual_scale > 0.0) {
        return Err(Error::InvalidPrior("residual scale must be positive".into()));
    }

    let sites: Vec<PreparedSite> = model
        .datasets
        .iter()
        .map(|d| prepare_site(spec, d))
        .collect::<Result<_>>()?;
    {
        let mut seen = std::collections::BTreeSet::new();
        for s in &sites {
            if !seen.insert(&s.site_id) {
                return Err(Error::DuplicateSite(s.site_id.clone()));
            }
        }
    }

    // Which sites carry each global parameter.
    let mut beta_sites: Vec<Vec<usize>> = vec![Vec::new(); p];
    let mut psi_sites: Vec<Vec<usize>> = vec![Vec::new(); q];
    for (i, site) in sites.iter().enumerate() {
        for &param in &site.params {
            if param < p {
                beta_sites[param].push(i);
            } else {
                psi_sites[param - p].push(i);
            }
        }
    }
    let inestimable: Vec<usize> = (0..q).filter(|&t| psi_sites[t].is_empty()).collect();
    let horseshoe = psi_priors.horseshoe_indices();

    // Parameter layout.
    let mut param_names: Vec<String> = labels.iter().map(|l| format!("psi[{l}]")).collect();
    param_names.extend(labels.iter().map(|l| format!("sigma_psi[{l}]")));
    for term in &spec.treatment_free_terms {
        param_names.push(format!("beta[{term}]"));
    }
    for term in &spec.treatment_free_terms {
        param_names.push(format!("sigma_beta[{term}]"));
    }
    for site in &sites {
        param_names.push(format!("sigma[{}]", site.site_id));
    }
    for site in &sites {
        for &param in &site.params {
            if param < p {
                param_names.push(format!(
                    "beta_site[{}]@{}",
                    spec.treatment_free_terms[param], site.site_id
                ));
            } else {
                param_names.push(format!("psi_site[{}]@{}", labels[param - p], site.site_id));
            }
        }
    }
    for &t in &horseshoe {
        param_names.push(format!("lambda[{}]", labels[t]));
    }
    if !horseshoe.is_empty() {
        param_names.push("tau".to_string());
    }

    let mut chains = Vec::with_capacity(settings.n_chains);
    for chain_idx in 0..settings.n_chains {
        let mut rng = substream_rng(settings.seed, 0x0120_0000 + chain_idx as u64);
        let mut state = State::init(&sites, model, p, q);
        let mut kept = Vec::with_capacity(settings.n_kept);
        for iter in 0..settings.n_warmup + settings.n_kept {
            sweep(
                model,
                &sites,
                &beta_sites,
                &psi_sites,
                &psi_priors,
                &horseshoe,
                &mut state,
                &mut rng,
            )?;
            if iter >= settings.n_warmup {
                let mut row = Vec::with_capacity(param_names.len());
                row.extend_from_slice(&state.psi);
                row.extend(state.sigma2_psi.iter().map(|v| v.sqrt()));
                row.extend_from_slice(&state.beta);
                row.extend(state.sigma2_beta.iter().map(|v| v.sqrt()));
                row.extend(state.sigma2_res.iter().map(|v| v.sqrt()));
                for coef in &state.coef {
                    row.extend_from_slice(coef);
                }
                for &t in &horseshoe {
                    row.push(state.lambda2[t].sqrt());
                }
                if !horseshoe.is_empty() {
                    row.push(state.tau2.sqrt());
                }
                kept.push(row);
            }
        }
        chains.push(kept);
    }

    Ok(PooledPosterior {
        param_names,
        labels,
        n_psi: q,
        horseshoe,
        inestimable,
        chains,
        meta: ChainMeta {
            n_chains: settings.n_chains,
            n_warmup: settings.n_warmup,
            n_kept: settings.n_kept,
            seed: settings.seed,
        },
    })
}

struct State {
    beta: Vec<f64>,
    psi: Vec<f64>,
    sigma2_beta: Vec<f64>,
    nu_beta: Vec<f64>,
    sigma2_psi: Vec<f64>,
    nu_psi: Vec<f64>,
    coef: Vec<Vec<f64>>,
    sigma2_res: Vec<f64>,
    nu_res: Vec<f64>,
    lambda2: Vec<f64>,
    nu_lambda: Vec<f64>,
    tau2: f64,
    nu_tau: f64,
}

impl State {
    fn init(sites: &[PreparedSite], model: &OneStageModel, p: usize, q: usize) -> State {
        let sigma2_beta = match model.priors.beta_variance {
            VariancePrior::Fixed { value } => vec![value; p],
            VariancePrior::HalfCauchy { .. } => vec![1.0; p],
        };
        State {
            beta: vec![0.0; p],
            psi: vec![0.0; q],
            sigma2_beta,
            nu_beta: vec![1.0; p],
            sigma2_psi: vec![1.0; q],
            nu_psi: vec![1.0; q],
            coef: sites.iter().map(|s| vec![0.0; s.params.len()]).collect(),
            sigma2_res: vec![model.priors.residual_fixed.unwrap_or(1.0); sites.len()],
            nu_res: vec![1.0; sites.len()],
            lambda2: vec![1.0; q],
            nu_lambda: vec![1.0; q],
            tau2: 1.0,
            nu_tau: 1.0,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    model: &OneStageModel,
    sites: &[PreparedSite],
    beta_sites: &[Vec<usize>],
    psi_sites: &[Vec<usize>],
    psi_priors: &crate::stage_two::ResolvedPriors,
    horseshoe: &[usize],
    state: &mut State,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<()> {
    let p = state.beta.len();
    let q = state.psi.len();

    // Per-site coefficient blocks and residual variances.
    for (i, site) in sites.iter().enumerate() {
        let d = site.params.len();
        let inv_res = 1.0 / state.sigma2_res[i];
        let mut prec = site.gram.clone();
        let mut b: Vec<f64> = site.gty.iter().map(|v| v * inv_res).collect();
        for r in 0..d {
            for c in 0..d {
                prec.set(r, c, prec.get(r, c) * inv_res);
            }
        }
        for (j, &param) in site.params.iter().enumerate() {
            let (prior_var, prior_mean) = if param < p {
                (state.sigma2_beta[param], state.beta[param])
            } else {
                (state.sigma2_psi[param - p], state.psi[param - p])
            };
            prec.set(j, j, prec.get(j, j) + 1.0 / prior_var);
            b[j] += prior_mean / prior_var;
        }
        let (draw, _) = mvn_draw_from_precision(&prec, &b, rng).ok_or(
            Error::NonPositiveDefinite {
                context: format!("one-stage coefficient block for {}", site.site_id),
            },
        )?;
        state.coef[i] = draw;

        if model.priors.residual_fixed.is_none() {
            let c = &state.coef[i];
            let mut sse = site.yty;
            for (j, &cj) in c.iter().enumerate() {
                sse -= 2.0 * cj * site.gty[j];
                for (k, &ck) in c.iter().enumerate() {
                    sse += cj * ck * site.gram.get(j, k);
                }
            }
            let sse = sse.max(0.0);
            state.sigma2_res[i] = inverse_gamma_draw(
                0.5 + site.n_obs as f64 / 2.0,
                1.0 / state.nu_res[i] + sse / 2.0,
                rng,
            );
            let scale = model.priors.residual_scale;
            let (a_shape, a_rate) = conditionals::half_cauchy_aux(scale, state.sigma2_res[i]);
            state.nu_res[i] = inverse_gamma_draw(a_shape, a_rate, rng);
        }
    }

    // Common treatment-free levels and their scales.
    for s in 0..p {
        let prior_precision = match model.priors.beta_mean {
            MeanPrior::Flat => 0.0,
            MeanPrior::Normal { variance } => 1.0 / variance,
            _ => unreachable!("validated"),
        };
        let carriers = &beta_sites[s];
        let sum: f64 = carriers
            .iter()
            .map(|&i| {
                let pos = sites[i].params.iter().position(|&u| u == s).unwrap();
                state.coef[i][pos]
            })
            .sum();
        if prior_precision == 0.0 && carriers.is_empty() {
            return Err(Error::InvalidPrior(format!(
                "flat prior on treatment-free level {s} with no data"
            )));
        }
        let cond = conditionals::common_mean_hierarchical(
            prior_precision,
            carriers.len(),
            sum,
            state.sigma2_beta[s],
        );
        state.beta[s] = cond.draw(rng);

        if let VariancePrior::HalfCauchy { scale } = model.priors.beta_variance {
            let ss: f64 = carriers
                .iter()
                .map(|&i| {
                    let pos = sites[i].params.iter().position(|&u| u == s).unwrap();
                    let dev = state.coef[i][pos] - state.beta[s];
                    dev * dev
                })
                .sum();
            let (shape, rate) =
                conditionals::between_variance(carriers.len(), ss, state.nu_beta[s]);
            state.sigma2_beta[s] = inverse_gamma_draw(shape, rate, rng);
            let (a_shape, a_rate) = conditionals::half_cauchy_aux(scale, state.sigma2_beta[s]);
            state.nu_beta[s] = inverse_gamma_draw(a_shape, a_rate, rng);
        }
    }

    // Common blip levels, their scales, and the horseshoe.
    for t in 0..q {
        let (prior_precision, truncation) = match psi_priors.mean[t] {
            MeanPrior::Flat => (0.0, None),
            MeanPrior::Normal { variance } => (1.0 / variance, None),
            MeanPrior::TruncatedNormal { variance, sign } => (1.0 / variance, Some(sign)),
            MeanPrior::Horseshoe => (1.0 / (state.tau2 * state.lambda2[t]), None),
        };
        let carriers = &psi_sites[t];
        if prior_precision == 0.0 && carriers.is_empty() {
            return Err(Error::InvalidPrior(format!(
                "flat prior on blip component {t} with no data"
            )));
        }
        let sum: f64 = carriers
            .iter()
            .map(|&i| {
                let pos = sites[i].params.iter().position(|&u| u == p + t).unwrap();
                state.coef[i][pos]
            })
            .sum();
        let cond = conditionals::common_mean_hierarchical(
            prior_precision,
            carriers.len(),
            sum,
            state.sigma2_psi[t],
        );
        state.psi[t] = match truncation {
            Some(TruncationSign::Positive) => {
                cond.draw_truncated(TruncationSign::Positive, rng)
            }
            Some(TruncationSign::Negative) => {
                cond.draw_truncated(TruncationSign::Negative, rng)
            }
            None => cond.draw(rng),
        };

        if let VariancePrior::HalfCauchy { scale } = psi_priors.variance[t] {
            let ss: f64 = carriers
                .iter()
                .map(|&i| {
                    let pos = sites[i].params.iter().position(|&u| u == p + t).unwrap();
                    let dev = state.coef[i][pos] - state.psi[t];
                    dev * dev
                })
                .sum();
            let (shape, rate) = conditionals::between_variance(carriers.len(), ss, state.nu_psi[t]);
            state.sigma2_psi[t] = inverse_gamma_draw(shape, rate, rng);
            let (a_shape, a_rate) = conditionals::half_cauchy_aux(scale, state.sigma2_psi[t]);
            state.nu_psi[t] = inverse_gamma_draw(a_shape, a_rate, rng);
        }
    }

    if !horseshoe.is_empty() {
        for &t in horseshoe {
            let (shape, rate) =
                conditionals::local_shrinkage(state.psi[t], state.tau2, state.nu_lambda[t]);
            state.lambda2[t] = inverse_gamma_draw(shape, rate, rng);
            let (a_shape, a_rate) = conditionals::half_cauchy_aux(1.0, state.lambda2[t]);
            state.nu_lambda[t] = inverse_gamma_draw(a_shape, a_rate, rng);
        }
        let sum_ratio: f64 = horseshoe
            .iter()
            .map(|&t| state.psi[t] * state.psi[t] / state.lambda2[t])
            .sum();
        let (shape, rate) =
            conditionals::global_shrinkage(horseshoe.len(), sum_ratio, state.nu_tau);
        state.tau2 = inverse_gamma_draw(shape, rate, rng);
        let (a_shape, a_rate) = conditionals::half_cauchy_aux(1.0, state.tau2);
        state.nu_tau = inverse_gamma_draw(a_shape, a_rate, rng);
    }

    Ok(())
}
