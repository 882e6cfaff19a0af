//! Posterior draw container, summaries, and selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::{mean, median, quantile, split_rhat};

/// Chain bookkeeping carried with the draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChainMeta {
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_kept: usize,
    pub seed: u64,
}

/// Kept MCMC draws for every model parameter, merged deterministically by
/// chain order, with summary accessors.
#[derive(Debug, Clone)]
pub struct PooledPosterior {
    pub param_names: Vec<String>,
    /// Blip component labels, indexed by flattened component index.
    pub labels: Vec<String>,
    pub n_psi: usize,
    /// Component indices under the horseshoe prior.
    pub horseshoe: Vec<usize>,
    /// Component indices with no likelihood anywhere (posterior == prior).
    pub inestimable: Vec<usize>,
    /// `chains[c][iter][param]`.
    pub chains: Vec<Vec<Vec<f64>>>,
    pub meta: ChainMeta,
}

/// Per-parameter posterior summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub median: f64,
    pub q025: f64,
    pub q975: f64,
    pub rhat: f64,
}

impl PooledPosterior {
    pub fn n_params(&self) -> usize {
        self.param_names.len()
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.param_names.iter().position(|n| n == name)
    }

    /// All kept draws of one parameter, chains concatenated in order.
    pub fn draws(&self, param: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.meta.n_chains * self.meta.n_kept);
        for chain in &self.chains {
            out.extend(chain.iter().map(|row| row[param]));
        }
        out
    }

    /// Kept draws of one parameter, per chain.
    pub fn chain_draws(&self, param: usize) -> Vec<Vec<f64>> {
        self.chains
            .iter()
            .map(|chain| chain.iter().map(|row| row[param]).collect())
            .collect()
    }

    pub fn mean(&self, param: usize) -> f64 {
        mean(&self.draws(param))
    }

    pub fn median(&self, param: usize) -> f64 {
        median(&self.draws(param))
    }

    pub fn quantile(&self, param: usize, p: f64) -> f64 {
        quantile(&self.draws(param), p)
    }

    /// Split R-hat. Scale parameters (between-site SDs, shrinkage scales,
    /// residual SDs) are diagnosed on the log scale, where their heavy
    /// half-Cauchy tails have finite variance.
    pub fn rhat(&self, param: usize) -> f64 {
        let chains = self.chain_draws(param);
        let first = chains[0].first().copied();
        if chains
            .iter()
            .all(|c| c.iter().all(|&v| Some(v) == first))
        {
            return 1.0;
        }
        let name = &self.param_names[param];
        let is_scale = name.starts_with("sigma") || name.starts_with("lambda") || name == "tau";
        if is_scale && chains.iter().all(|c| c.iter().all(|&v| v > 0.0)) {
            let logged: Vec<Vec<f64>> = chains
                .iter()
                .map(|c| c.iter().map(|v| v.ln()).collect())
                .collect();
            split_rhat(&logged)
        } else {
            split_rhat(&chains)
        }
    }

    /// Posterior means of the blip components (parameters `0..n_psi`).
    pub fn psi_means(&self) -> Vec<f64> {
        (0..self.n_psi).map(|t| self.mean(t)).collect()
    }

    /// Posterior medians of the blip components.
    pub fn psi_medians(&self) -> Vec<f64> {
        (0..self.n_psi).map(|t| self.median(t)).collect()
    }

    pub fn summaries(&self) -> Vec<ParamSummary> {
        (0..self.n_params())
            .map(|p| {
                let draws = self.draws(p);
                ParamSummary {
                    name: self.param_names[p].clone(),
                    mean: mean(&draws),
                    median: median(&draws),
                    q025: quantile(&draws, 0.025),
                    q975: quantile(&draws, 0.975),
                    rhat: self.rhat(p),
                }
            })
            .collect()
    }

    /// Writes all kept draws as CSV: `chain,iter` then one column per
    /// parameter, deterministic bytes for fixed draws.
    pub fn write_draws_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend(self.param_names.iter().cloned());
        wtr.write_record(&header)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, row) in chain.iter().enumerate() {
                let mut record = vec![c.to_string(), i.to_string()];
                record.extend(row.iter().map(|v| format!("{v}")));
                wtr.write_record(&record)?;
            }
        }
        wtr.flush()?;
        Ok(())
    }

    /// Assembles the serializable summary document.
    pub fn summary_doc(&self, model_fingerprint: &str, level: f64) -> PosteriorSummaryDoc {
        let selected = select_interactions(self, level);
        PosteriorSummaryDoc {
            schema_version: 1,
            model_fingerprint: model_fingerprint.to_string(),
            seed: self.meta.seed,
            n_chains: self.meta.n_chains,
            n_warmup: self.meta.n_warmup,
            n_kept: self.meta.n_kept,
            psi_labels: self.labels.clone(),
            psi_mean: self.psi_means(),
            psi_median: self.psi_medians(),
            horseshoe_labels: self.horseshoe.iter().map(|&t| self.labels[t].clone()).collect(),
            selected_labels: selected.iter().map(|&t| self.labels[t].clone()).collect(),
            inestimable_labels: self
                .inestimable
                .iter()
                .map(|&t| self.labels[t].clone())
                .collect(),
            parameters: self.summaries(),
        }
    }
}

/// Credible-interval selection: a horseshoe component is selected when its
/// equal-tailed interval at the given level excludes zero. Components not
/// under the horseshoe (in particular the blip intercepts) are reported but
/// never subject to selection.
pub fn select_interactions(posterior: &PooledPosterior, level: f64) -> Vec<usize> {
    assert!((0.0..1.0).contains(&level) && level > 0.0);
    let alpha = (1.0 - level) / 2.0;
    posterior
        .horseshoe
        .iter()
        .copied()
        .filter(|&t| {
            let draws = posterior.draws(t);
            let lo = quantile(&draws, alpha);
            let hi = quantile(&draws, 1.0 - alpha);
            lo > 0.0 || hi < 0.0
        })
        .collect()
}

/// The pooling run's output document: point estimates for rule extraction
/// plus per-parameter summaries. Serialized deterministically.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummaryDoc {
    pub schema_version: u32,
    pub model_fingerprint: String,
    pub seed: u64,
    pub n_chains: usize,
    pub n_warmup: usize,
    pub n_kept: usize,
    pub psi_labels: Vec<String>,
    pub psi_mean: Vec<f64>,
    pub psi_median: Vec<f64>,
    pub horseshoe_labels: Vec<String>,
    pub selected_labels: Vec<String>,
    pub inestimable_labels: Vec<String>,
    pub parameters: Vec<ParamSummary>,
}

impl PosteriorSummaryDoc {
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn from_json_bytes(bytes: &[u8]) -> Result<PosteriorSummaryDoc> {
        Ok(serde_json::from_slice(bytes)?)
    }

    pub fn from_path(path: &std::path::Path) -> Result<PosteriorSummaryDoc> {
        PosteriorSummaryDoc::from_json_bytes(&std::fs::read(path)?)
    }

    /// Rule-ready point estimates: the chosen estimator per component, with
    /// unselected horseshoe components zeroed.
    pub fn rule_point_estimates(&self, use_median: bool) -> Vec<f64> {
        let base = if use_median {
            &self.psi_median
        } else {
            &self.psi_mean
        };
        base.iter()
            .enumerate()
            .map(|(t, &v)| {
                let label = &self.psi_labels[t];
                if self.horseshoe_labels.contains(label) && !self.selected_labels.contains(label) {
                    0.0
                } else {
                    v
                }
            })
            .collect()
    }

    pub fn psi_index_of(&self, label: &str) -> Result<usize> {
        self.psi_labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::RuleMismatch(format!("no blip component labelled `{label}`")))
    }
}
