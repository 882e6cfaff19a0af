//! Prior configuration for the pooling model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::TruncationSign;
use crate::model::ModelSpec;

/// Prior on one common blip mean.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum MeanPrior {
    /// Improper flat prior. Valid only for parameters that receive
    /// likelihood, directly or through site effects.
    Flat,
    /// Zero-centered normal with the given variance.
    Normal { variance: f64 },
    /// Zero-centered normal restricted to one sign.
    TruncatedNormal {
        variance: f64,
        sign: TruncationSign,
    },
    /// Global-local shrinkage: `psi_t ~ N(0, tau^2 lambda_t^2)` with
    /// half-Cauchy(0,1) local and global scales shared across all
    /// horseshoe-tagged indices.
    Horseshoe,
}

impl MeanPrior {
    fn validate(&self) -> Result<()> {
        match self {
            MeanPrior::Normal { variance } | MeanPrior::TruncatedNormal { variance, .. } => {
                if !(variance.is_finite() && *variance > 0.0) {
                    return Err(Error::InvalidPrior(format!(
                        "normal prior variance must be positive, got {variance}"
                    )));
                }
            }
            MeanPrior::Flat | MeanPrior::Horseshoe => {}
        }
        Ok(())
    }
}

/// Prior on the between-site standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "dist", rename_all = "snake_case")]
pub enum VariancePrior {
    /// Half-Cauchy(0, scale) on the standard deviation, sampled through the
    /// conjugate inverse-gamma mixture.
    HalfCauchy { scale: f64 },
    /// Between-site variance pinned to a constant. Zero collapses the site
    /// effects onto the common mean.
    Fixed { value: f64 },
}

impl VariancePrior {
    fn validate(&self) -> Result<()> {
        match self {
            VariancePrior::HalfCauchy { scale } => {
                if !(scale.is_finite() && *scale > 0.0) {
                    return Err(Error::InvalidPrior(format!(
                        "half-Cauchy scale must be positive, got {scale}"
                    )));
                }
            }
            VariancePrior::Fixed { value } => {
                if !(value.is_finite() && *value >= 0.0) {
                    return Err(Error::InvalidPrior(format!(
                        "fixed between-site variance must be nonnegative, got {value}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Default mean-prior variance: a vague normal.
pub const DEFAULT_MEAN_VARIANCE: f64 = 10_000.0;

/// Variance of the normal prior placed on main treatment effects when the
/// interactions carry the horseshoe.
pub const MAIN_EFFECT_VARIANCE: f64 = 100.0 * 100.0;

/// Prior configuration: a default mean prior, per-index overrides, and one
/// variance-component prior shared by every between-site scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorConfig {
    pub default_mean: MeanPrior,
    /// Overrides keyed by blip coefficient label (`a*x1`, `a2*intercept`).
    #[serde(default)]
    pub mean_overrides: BTreeMap<String, MeanPrior>,
    pub variance: VariancePrior,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            default_mean: MeanPrior::Normal {
                variance: DEFAULT_MEAN_VARIANCE,
            },
            mean_overrides: BTreeMap::new(),
            variance: VariancePrior::HalfCauchy { scale: 1.0 },
        }
    }
}

impl PriorConfig {
    /// Vague normal means, half-Cauchy(0, scale) variance components.
    pub fn vague_normal(scale: f64) -> Self {
        PriorConfig {
            variance: VariancePrior::HalfCauchy { scale },
            ..PriorConfig::default()
        }
    }

    /// Horseshoe on every treatment-covariate interaction; main treatment
    /// effects keep a vague normal. Intercepts are never shrunk.
    pub fn horseshoe(spec: &ModelSpec) -> Self {
        let mut overrides = BTreeMap::new();
        let intercepts = spec.psi_intercept_indices();
        for t in 0..spec.n_blip() {
            let prior = if intercepts.contains(&t) {
                MeanPrior::Normal {
                    variance: MAIN_EFFECT_VARIANCE,
                }
            } else {
                MeanPrior::Horseshoe
            };
            overrides.insert(spec.psi_label(t), prior);
        }
        PriorConfig {
            default_mean: MeanPrior::Normal {
                variance: DEFAULT_MEAN_VARIANCE,
            },
            mean_overrides: overrides,
            variance: VariancePrior::HalfCauchy { scale: 1.0 },
        }
    }

    /// Sign-constrained dose model: positive linear dose intercept, negative
    /// quadratic intercept, horseshoe on all interactions.
    pub fn truncated_dose(spec: &ModelSpec) -> Result<Self> {
        if spec.blip_terms_quadratic.is_empty() {
            return Err(Error::InvalidPrior(
                "truncated dose priors require a quadratic blip block".into(),
            ));
        }
        let mut config = PriorConfig::horseshoe(spec);
        let intercepts = spec.psi_intercept_indices();
        config.mean_overrides.insert(
            spec.psi_label(intercepts[0]),
            MeanPrior::TruncatedNormal {
                variance: MAIN_EFFECT_VARIANCE,
                sign: TruncationSign::Positive,
            },
        );
        config.mean_overrides.insert(
            spec.psi_label(intercepts[1]),
            MeanPrior::TruncatedNormal {
                variance: MAIN_EFFECT_VARIANCE,
                sign: TruncationSign::Negative,
            },
        );
        Ok(config)
    }

    /// Resolves per-index priors for a model with the given labels.
    pub fn resolve(&self, labels: &[String]) -> Result<ResolvedPriors> {
        self.default_mean.validate()?;
        self.variance.validate()?;
        for (label, prior) in &self.mean_overrides {
            prior.validate()?;
            if !labels.contains(label) {
                return Err(Error::InvalidPrior(format!(
                    "mean prior override for unknown coefficient `{label}`"
                )));
            }
        }
        let mean: Vec<MeanPrior> = labels
            .iter()
            .map(|l| {
                self.mean_overrides
                    .get(l)
                    .copied()
                    .unwrap_or(self.default_mean)
            })
            .collect();
        let variance = vec![self.variance; labels.len()];
        Ok(ResolvedPriors { mean, variance })
    }

    pub fn from_toml_str(text: &str) -> Result<PriorConfig> {
        Ok(toml::from_str(text)?)
    }
}

/// Per-index priors after resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPriors {
    pub mean: Vec<MeanPrior>,
    pub variance: Vec<VariancePrior>,
}

impl ResolvedPriors {
    pub fn n_params(&self) -> usize {
        self.mean.len()
    }

    pub fn horseshoe_indices(&self) -> Vec<usize> {
        self.mean
            .iter()
            .enumerate()
            .filter(|(_, p)| matches!(p, MeanPrior::Horseshoe))
            .map(|(i, _)| i)
            .collect()
    }
}
