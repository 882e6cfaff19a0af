//! Replicated simulation studies: generate, fit per site, pool, extract the
//! rule, evaluate — then aggregate performance metrics.
//!
//! Per replicate the pipeline is sequential; replicates run in parallel over
//! a worker pool. Determinism holds regardless of thread schedule because
//! every random draw comes from substreams keyed by replicate and purpose:
//! identical configuration and seed produce byte-identical metrics output.
//!
//! Reported measures follow the usual simulation-study conventions:
//! relative bias `(mean(psi_hat) - psi) / psi`, the SD of the estimator
//! across replicates, the mean and SD of the value-function difference on a
//! shared evaluation cohort, and selection proportions for horseshoe runs
//! (over all replicates and over the subset where the component was
//! selected).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::itr::{evaluate_rule_on_cohort, Rule};
use crate::mcmc::{mean, sample_sd, substream_rng};
use crate::model::fmt_float;
use crate::one_stage::{run_onestage, OneStageModel, OneStagePriors};
use crate::simgen::{gen_cohort, generate_replicate, stream_key, Purpose, Scenario};
use crate::stage_one::run_site_pipeline;
use crate::stage_two::{
    assemble_likelihood, run_mcmc, select_interactions, McmcSettings, PooledPosterior,
    PriorConfig,
};

/// Chain controls without the seed (the study derives per-replicate seeds).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McmcConfig {
    #[serde(default = "default_chains")]
    pub n_chains: usize,
    #[serde(default = "default_warmup")]
    pub n_warmup: usize,
    #[serde(default = "default_kept")]
    pub n_kept: usize,
}

fn default_chains() -> usize {
    2
}
fn default_warmup() -> usize {
    1000
}
fn default_kept() -> usize {
    1000
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_chains: 2,
            n_warmup: 1000,
            n_kept: 1000,
        }
    }
}

/// Point estimator used to build the treatment rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointEstimator {
    Mean,
    Median,
}

/// Full study configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub scenario: Scenario,
    #[serde(default)]
    pub priors: PriorConfig,
    #[serde(default)]
    pub mcmc: McmcConfig,
    #[serde(default = "default_replicates")]
    pub replicates: u32,
    #[serde(default = "default_cohort")]
    pub cohort_size: usize,
    #[serde(default = "default_estimator")]
    pub point_estimator: PointEstimator,
    #[serde(default = "default_level")]
    pub selection_level: f64,
    #[serde(default)]
    pub run_one_stage: bool,
    #[serde(default)]
    pub dose_bounds: Option<(f64, f64)>,
    /// Abort when more than this percentage of replicates fail.
    #[serde(default = "default_failure_limit")]
    pub max_failure_percent: u8,
}

fn default_replicates() -> u32 {
    200
}
fn default_cohort() -> usize {
    100_000
}
fn default_estimator() -> PointEstimator {
    PointEstimator::Mean
}
fn default_level() -> f64 {
    0.95
}
fn default_failure_limit() -> u8 {
    5
}

impl StudyConfig {
    pub fn new(scenario: Scenario) -> Self {
        StudyConfig {
            scenario,
            priors: PriorConfig::default(),
            mcmc: McmcConfig::default(),
            replicates: default_replicates(),
            cohort_size: default_cohort(),
            point_estimator: default_estimator(),
            selection_level: default_level(),
            run_one_stage: false,
            dose_bounds: None,
            max_failure_percent: default_failure_limit(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<StudyConfig> {
        let config: StudyConfig = toml::from_str(text)?;
        config.scenario.validate()?;
        Ok(config)
    }
}

/// One replicate's results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: u32,
    /// Raw point estimates (no selection zeroing), per blip component.
    pub psi_hat: Vec<f64>,
    /// Per component: was it selected (always false off the horseshoe set).
    pub selected: Vec<bool>,
    pub dvf: f64,
    pub max_rhat: f64,
    pub one_stage_psi_hat: Option<Vec<f64>>,
    pub one_stage_dvf: Option<f64>,
}

/// Aggregate metrics for one blip component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexMetrics {
    pub label: String,
    pub true_value: f64,
    pub mean_estimate: f64,
    /// `(mean - true) / true`; absent when the true value is zero.
    pub relative_bias: Option<f64>,
    pub sd: f64,
    /// Fraction of replicates selecting this component (horseshoe only).
    pub selection_proportion: Option<f64>,
    /// Metrics over the subset of replicates where this component was
    /// selected (horseshoe only).
    pub selected_count: Option<usize>,
    pub selected_mean_estimate: Option<f64>,
    pub selected_relative_bias: Option<f64>,
    pub selected_sd: Option<f64>,
}

/// Aggregate metrics for one estimation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyMetrics {
    pub per_index: Vec<IndexMetrics>,
    pub dvf_mean: f64,
    pub dvf_sd: f64,
    pub n_replicates: usize,
    pub n_failed: usize,
}

/// Everything a study run produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StudyOutput {
    pub config: StudyConfig,
    pub records: Vec<ReplicateRecord>,
    pub metrics: StudyMetrics,
    pub one_stage_metrics: Option<StudyMetrics>,
    pub failures: Vec<(u32, String)>,
}

fn replicate_seed(scenario_seed: u64, replicate: u32, purpose: Purpose) -> u64 {
    substream_rng(scenario_seed, stream_key(replicate, 0, purpose)).gen()
}

fn run_replicate(
    config: &StudyConfig,
    cohort: &crate::simgen::CovariateTable,
    replicate: u32,
) -> Result<ReplicateRecord> {
    let scenario = &config.scenario;
    let spec = scenario.model_spec();
    let labels = spec.psi_labels();
    let q = spec.n_blip();

    let data = generate_replicate(scenario, replicate)?;
    let mut summaries = Vec::with_capacity(data.sites.len());
    for site in &data.sites {
        summaries.push(run_site_pipeline(&spec, site)?);
    }

    let graph = assemble_likelihood(&summaries, q)?;
    let priors = config.priors.resolve(&labels)?;
    let settings = McmcSettings {
        n_chains: config.mcmc.n_chains,
        n_warmup: config.mcmc.n_warmup,
        n_kept: config.mcmc.n_kept,
        seed: replicate_seed(scenario.seed, replicate, Purpose::Mcmc),
    };
    let posterior = run_mcmc(&graph, &priors, &labels, &settings)?;

    let psi_hat = point_estimates(&posterior, config.point_estimator);
    let selected_idx = select_interactions(&posterior, config.selection_level);
    let mut selected = vec![false; q];
    for &t in &selected_idx {
        selected[t] = true;
    }
    let max_rhat = (0..posterior.n_params())
        .map(|p| posterior.rhat(p))
        .fold(1.0f64, f64::max);

    let rule = rule_from_estimates(&spec, &psi_hat, &posterior.horseshoe, &selected)?;
    let eval = evaluate_rule_on_cohort(&rule, scenario, cohort, scenario.seed, config.dose_bounds)?;

    let (one_stage_psi_hat, one_stage_dvf) = if config.run_one_stage {
        let model = OneStageModel {
            spec: spec.clone(),
            datasets: data.sites.clone(),
            priors: OneStagePriors {
                psi: config.priors.clone(),
                ..OneStagePriors::default()
            },
        };
        let settings = McmcSettings {
            n_chains: config.mcmc.n_chains,
            n_warmup: config.mcmc.n_warmup,
            n_kept: config.mcmc.n_kept,
            seed: replicate_seed(scenario.seed, replicate, Purpose::OneStage),
        };
        let posterior = run_onestage(&model, &settings)?;
        let psi_hat_os = point_estimates(&posterior, config.point_estimator);
        let selected_os_idx = select_interactions(&posterior, config.selection_level);
        let mut selected_os = vec![false; q];
        for &t in &selected_os_idx {
            selected_os[t] = true;
        }
        let rule = rule_from_estimates(&spec, &psi_hat_os, &posterior.horseshoe, &selected_os)?;
        let eval =
            evaluate_rule_on_cohort(&rule, scenario, cohort, scenario.seed, config.dose_bounds)?;
        (Some(psi_hat_os), Some(eval.dvf))
    } else {
        (None, None)
    };

    Ok(ReplicateRecord {
        replicate,
        psi_hat,
        selected,
        dvf: eval.dvf,
        max_rhat,
        one_stage_psi_hat,
        one_stage_dvf,
    })
}

fn point_estimates(posterior: &PooledPosterior, estimator: PointEstimator) -> Vec<f64> {
    match estimator {
        PointEstimator::Mean => posterior.psi_means(),
        PointEstimator::Median => posterior.psi_medians(),
    }
}

/// Rule construction: unselected horseshoe components are zeroed; everything
/// else uses the raw point estimate.
fn rule_from_estimates(
    spec: &crate::model::ModelSpec,
    psi_hat: &[f64],
    horseshoe: &[usize],
    selected: &[bool],
) -> Result<Rule> {
    let points: Vec<f64> = psi_hat
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            if horseshoe.contains(&t) && !selected[t] {
                0.0
            } else {
                v
            }
        })
        .collect();
    Rule::from_spec(spec, points)
}

/// Runs the full study: all replicates in parallel, shared evaluation
/// cohort, failure accounting, and metric aggregation.
pub fn run_study(config: &StudyConfig) -> Result<StudyOutput> {
    config.scenario.validate()?;
    let cohort = gen_cohort(&config.scenario, config.cohort_size, config.scenario.seed);

    let results: Vec<(u32, Result<ReplicateRecord>)> = (0..config.replicates)
        .into_par_iter()
        .map(|r| (r, run_replicate(config, &cohort, r)))
        .collect();

    let mut records = Vec::with_capacity(results.len());
    let mut failures = Vec::new();
    for (r, result) in results {
        match result {
            Ok(record) => records.push(record),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    let limit = config.max_failure_percent as usize;
    if failures.len() * 100 > limit * config.replicates as usize {
        return Err(Error::StudyFailureRate {
            failed: failures.len(),
            total: config.replicates as usize,
            limit_percent: config.max_failure_percent,
        });
    }

    let spec = config.scenario.model_spec();
    let labels = spec.psi_labels();
    let truth = config.scenario.resolved_theta().psi;
    let horseshoe = config.priors.resolve(&labels)?.horseshoe_indices();

    let metrics = aggregate(
        &labels,
        &truth,
        &horseshoe,
        &records,
        failures.len(),
        |rec| (&rec.psi_hat, Some(&rec.selected), rec.dvf),
    );
    let one_stage_metrics = if config.run_one_stage {
        Some(aggregate(
            &labels,
            &truth,
            &horseshoe,
            &records,
            failures.len(),
            |rec| {
                (
                    rec.one_stage_psi_hat.as_ref().expect("one-stage enabled"),
                    None,
                    rec.one_stage_dvf.expect("one-stage enabled"),
                )
            },
        ))
    } else {
        None
    };

    Ok(StudyOutput {
        config: config.clone(),
        records,
        metrics,
        one_stage_metrics,
        failures,
    })
}

fn aggregate<'r, F>(
    labels: &[String],
    truth: &[f64],
    horseshoe: &[usize],
    records: &'r [ReplicateRecord],
    n_failed: usize,
    extract: F,
) -> StudyMetrics
where
    F: Fn(&'r ReplicateRecord) -> (&'r Vec<f64>, Option<&'r Vec<bool>>, f64),
{
    let q = labels.len();
    let mut per_index = Vec::with_capacity(q);
    let dvfs: Vec<f64> = records.iter().map(|r| extract(r).2).collect();

    for t in 0..q {
        let estimates: Vec<f64> = records.iter().map(|r| extract(r).0[t]).collect();
        let m = mean(&estimates);
        let sd = if estimates.len() > 1 {
            sample_sd(&estimates)
        } else {
            0.0
        };
        let relative_bias = if truth[t] != 0.0 {
            Some((m - truth[t]) / truth[t])
        } else {
            None
        };

        let is_hs = horseshoe.contains(&t);
        let (selection_proportion, selected_count, sel_mean, sel_rb, sel_sd) = if is_hs {
            let selected: Vec<f64> = records
                .iter()
                .filter_map(|r| {
                    let (est, sel, _) = extract(r);
                    match sel {
                        Some(flags) if flags[t] => Some(est[t]),
                        Some(_) => None,
                        // Paths without their own selection flags reuse the
                        // two-stage flags.
                        None if r.selected[t] => Some(est[t]),
                        None => None,
                    }
                })
                .collect();
            let prop = selected.len() as f64 / records.len().max(1) as f64;
            if selected.is_empty() {
                (Some(prop), Some(0), None, None, None)
            } else {
                let sm = mean(&selected);
                let srb = if truth[t] != 0.0 {
                    Some((sm - truth[t]) / truth[t])
                } else {
                    None
                };
                let ssd = if selected.len() > 1 {
                    Some(sample_sd(&selected))
                } else {
                    Some(0.0)
                };
                (Some(prop), Some(selected.len()), Some(sm), srb, ssd)
            }
        } else {
            (None, None, None, None, None)
        };

        per_index.push(IndexMetrics {
            label: labels[t].clone(),
            true_value: truth[t],
            mean_estimate: m,
            relative_bias,
            sd,
            selection_proportion,
            selected_count,
            selected_mean_estimate: sel_mean,
            selected_relative_bias: sel_rb,
            selected_sd: sel_sd,
        });
    }

    StudyMetrics {
        per_index,
        dvf_mean: mean(&dvfs),
        dvf_sd: if dvfs.len() > 1 { sample_sd(&dvfs) } else { 0.0 },
        n_replicates: records.len(),
        n_failed,
    }
}

impl StudyOutput {
    /// Per-replicate metrics CSV with deterministic bytes.
    pub fn write_replicates_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let labels = self.config.scenario.model_spec().psi_labels();
        let mut header = vec!["replicate".to_string()];
        header.extend(labels.iter().map(|l| format!("psi_hat[{l}]")));
        header.extend(labels.iter().map(|l| format!("selected[{l}]")));
        header.push("dvf".into());
        header.push("max_rhat".into());
        if self.config.run_one_stage {
            header.extend(labels.iter().map(|l| format!("one_stage_psi_hat[{l}]")));
            header.push("one_stage_dvf".into());
        }
        wtr.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![rec.replicate.to_string()];
            row.extend(rec.psi_hat.iter().map(|v| fmt_float(*v)));
            row.extend(rec.selected.iter().map(|s| u8::from(*s).to_string()));
            row.push(fmt_float(rec.dvf));
            row.push(fmt_float(rec.max_rhat));
            if self.config.run_one_stage {
                for v in rec.one_stage_psi_hat.as_ref().expect("one-stage enabled") {
                    row.push(fmt_float(*v));
                }
                row.push(fmt_float(rec.one_stage_dvf.expect("one-stage enabled")));
            }
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Aggregate report as deterministic JSON bytes.
    pub fn metrics_json_bytes(&self) -> Result<Vec<u8>> {
        #[derive(Serialize)]
        struct Doc<'a> {
            metrics: &'a StudyMetrics,
            one_stage_metrics: &'a Option<StudyMetrics>,
            failures: &'a Vec<(u32, String)>,
        }
        let mut bytes = serde_json::to_vec_pretty(&Doc {
            metrics: &self.metrics,
            one_stage_metrics: &self.one_stage_metrics,
            failures: &self.failures,
        })?;
        bytes.push(b'\n');
        Ok(bytes)
    }
}

/// A run manifest: configuration echo plus toolkit version, written beside
/// every output for reproducibility.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool_version: String,
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn for_config<T: Serialize>(config: &T) -> Result<Manifest> {
        Ok(Manifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config: serde_json::to_value(config)?,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(path, bytes)?;
        Ok(())
    }
}

/// Merges named per-study reports into one document keyed by study name,
/// deterministically ordered.
pub fn merge_reports(inputs: Vec<(String, serde_json::Value)>) -> serde_json::Value {
    let map: BTreeMap<String, serde_json::Value> = inputs.into_iter().collect();
    serde_json::to_value(map).expect("BTreeMap of values serializes")
}
