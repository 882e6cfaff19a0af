//! Simulation-study data-generating mechanisms.
//!
//! Four settings are implemented, each with site-varying covariate laws:
//!
//! - `binary`: two covariates, logistic propensity with six confounding
//!   scenarios, blip linear in `x1`;
//! - `continuous`: dose `A ~ N(x1, 1)` with a quadratic-in-dose blip;
//! - `sparse`: a binary and a three-level categorical covariate whose levels
//!   are structurally missing at most sites;
//! - `many_covariates`: ten or more covariates of which only three interact
//!   with treatment.
//!
//! Heterogeneity across sites is controlled through `I^2`, converted to a
//! between-site variance by `sigma_B^2 = I^2 sigma_eps^2 / (1 - I^2)`.
//!
//! All draws flow through substreams keyed by `(replicate, site, purpose)`,
//! so datasets are bit-reproducible for a given scenario and seed no matter
//! how replicates are scheduled.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mcmc::substream_rng;
use crate::model::{ModelSpec, SiteDataset, Term, TreatmentKind};

/// Which data-generating setting a scenario uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    Binary,
    Continuous,
    Sparse,
    ManyCovariates,
}

/// Between-site heterogeneity structure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeterogeneityKind {
    /// All sites share the population parameters.
    CommonEffect,
    /// Parameters vary but the blip intercept/slope ratio is pinned at -5,
    /// so every site has the same optimal rule (binary setting only).
    CommonRule,
    /// Every component varies independently around the population value.
    VaryingEffects,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Heterogeneity {
    pub kind: HeterogeneityKind,
    /// Fraction of total variance attributable to between-site variation.
    #[serde(default = "default_i_squared")]
    pub i_squared: f64,
}

fn default_i_squared() -> f64 {
    0.1
}

impl Heterogeneity {
    pub fn common_effect() -> Self {
        Heterogeneity {
            kind: HeterogeneityKind::CommonEffect,
            i_squared: 0.0,
        }
    }

    pub fn varying_effects(i_squared: f64) -> Self {
        Heterogeneity {
            kind: HeterogeneityKind::VaryingEffects,
            i_squared,
        }
    }
}

/// Population parameters in model order: treatment-free, then the flattened
/// blip vector (linear block, then quadratic block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueTheta {
    pub beta: Vec<f64>,
    pub psi: Vec<f64>,
}

/// A complete data-generating configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub setting: Setting,
    /// Covariate count for the many-covariates setting (ignored elsewhere).
    #[serde(default = "default_n_covariates")]
    pub n_covariates: usize,
    #[serde(default = "default_k_sites")]
    pub k_sites: usize,
    /// Average site sample size; site sizes draw uniformly from
    /// `[0.6 n, 1.4 n]`, rounded, with a floor of 10.
    pub n_mean: usize,
    /// Propensity scenario 1-6 (binary setting only).
    #[serde(default = "default_confounding")]
    pub confounding_scenario: u8,
    pub heterogeneity: Heterogeneity,
    /// Population parameters; defaults to the setting's canonical values.
    #[serde(default)]
    pub true_theta: Option<TrueTheta>,
    #[serde(default = "default_sigma_eps2")]
    pub sigma_eps2: f64,
    pub seed: u64,
}

fn default_n_covariates() -> usize {
    10
}

fn default_k_sites() -> usize {
    10
}

fn default_confounding() -> u8 {
    1
}

fn default_sigma_eps2() -> f64 {
    0.25
}

/// Substream purposes; combined with replicate and site into a stream key.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Purpose {
    SiteSize,
    SiteParams,
    Propensity,
    Covariates,
    Treatment,
    Noise,
    Cohort,
    Mcmc,
    OneStage,
}

impl Purpose {
    fn code(self) -> u64 {
        match self {
            Purpose::SiteSize => 0,
            Purpose::SiteParams => 1,
            Purpose::Propensity => 2,
            Purpose::Covariates => 3,
            Purpose::Treatment => 4,
            Purpose::Noise => 5,
            Purpose::Cohort => 6,
            Purpose::Mcmc => 7,
            Purpose::OneStage => 8,
        }
    }
}

/// Stream key for `(replicate, site, purpose)`.
pub fn stream_key(replicate: u32, site: u16, purpose: Purpose) -> u64 {
    (u64::from(replicate) << 24) | (u64::from(site) << 8) | purpose.code()
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.k_sites == 0 {
            return Err(Error::InvalidScenario("k_sites must be positive".into()));
        }
        if self.n_mean < 10 {
            return Err(Error::InvalidScenario("n_mean must be at least 10".into()));
        }
        if !(1..=6).contains(&self.confounding_scenario) {
            return Err(Error::InvalidScenario(format!(
                "confounding scenario {} outside 1..=6",
                self.confounding_scenario
            )));
        }
        if !(0.0..1.0).contains(&self.heterogeneity.i_squared) {
            return Err(Error::InvalidScenario(format!(
                "I^2 must lie in [0, 1), got {}",
                self.heterogeneity.i_squared
            )));
        }
        if self.heterogeneity.kind == HeterogeneityKind::CommonRule
            && self.setting != Setting::Binary
        {
            return Err(Error::InvalidScenario(
                "the common-rule structure is defined for the binary setting only".into(),
            ));
        }
        if !(self.sigma_eps2.is_finite() && self.sigma_eps2 > 0.0) {
            return Err(Error::InvalidScenario("sigma_eps2 must be positive".into()));
        }
        if self.setting == Setting::ManyCovariates && self.n_covariates < 3 {
            return Err(Error::InvalidScenario(
                "many-covariates setting needs at least 3 covariates".into(),
            ));
        }
        let theta = self.resolved_theta();
        let spec = self.model_spec();
        if theta.beta.len() != spec.n_treatment_free() || theta.psi.len() != spec.n_blip() {
            return Err(Error::InvalidScenario(format!(
                "true_theta dimensions ({}, {}) do not match the model ({}, {})",
                theta.beta.len(),
                theta.psi.len(),
                spec.n_treatment_free(),
                spec.n_blip()
            )));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Scenario> {
        let scenario: Scenario = toml::from_str(text)?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn from_path(path: &std::path::Path) -> Result<Scenario> {
        Scenario::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// The analysis model implied by the setting.
    pub fn model_spec(&self) -> ModelSpec {
        let numeric = |name: &str| Term::Numeric(name.to_string());
        match self.setting {
            Setting::Binary => ModelSpec {
                treatment_kind: TreatmentKind::Binary,
                treatment_free_terms: vec![Term::Intercept, numeric("x1"), numeric("x2")],
                blip_terms_linear: vec![Term::Intercept, numeric("x1")],
                blip_terms_quadratic: vec![],
            },
            Setting::Continuous => ModelSpec {
                treatment_kind: TreatmentKind::ContinuousQuadratic,
                treatment_free_terms: vec![Term::Intercept, numeric("x1"), numeric("x2")],
                blip_terms_linear: vec![Term::Intercept, numeric("x1")],
                blip_terms_quadratic: vec![Term::Intercept],
            },
            Setting::Sparse => {
                let terms = vec![
                    Term::Intercept,
                    numeric("x1"),
                    Term::Indicator {
                        var: "x2".into(),
                        level: "2".into(),
                    },
                    Term::Indicator {
                        var: "x2".into(),
                        level: "3".into(),
                    },
                ];
                ModelSpec {
                    treatment_kind: TreatmentKind::Binary,
                    treatment_free_terms: terms.clone(),
                    blip_terms_linear: terms,
                    blip_terms_quadratic: vec![],
                }
            }
            Setting::ManyCovariates => {
                let mut terms = vec![Term::Intercept];
                for j in 1..=self.n_covariates {
                    terms.push(numeric(&format!("x{j}")));
                }
                ModelSpec {
                    treatment_kind: TreatmentKind::Binary,
                    treatment_free_terms: terms.clone(),
                    blip_terms_linear: terms,
                    blip_terms_quadratic: vec![],
                }
            }
        }
    }

    /// Population parameters: the configured override or the setting's
    /// canonical defaults.
    pub fn resolved_theta(&self) -> TrueTheta {
        if let Some(theta) = &self.true_theta {
            return theta.clone();
        }
        match self.setting {
            Setting::Binary => TrueTheta {
                beta: vec![4.0, 1.0, 1.0],
                psi: vec![2.5, -0.5],
            },
            // Flattened blip order: [dose, dose*x1 | dose^2].
            Setting::Continuous => TrueTheta {
                beta: vec![4.0, 1.0, 1.0],
                psi: vec![1.0, 1.0, -2.0],
            },
            Setting::Sparse => TrueTheta {
                beta: vec![4.0, 1.0, 1.0, -1.0],
                psi: vec![1.0, 1.0, -2.5, 2.0],
            },
            Setting::ManyCovariates => {
                let p = self.n_covariates;
                let mut beta = vec![4.0];
                beta.extend(std::iter::repeat(1.0).take(p));
                let mut psi = vec![2.5, -0.5, 2.0, -1.0];
                psi.truncate(p + 1);
                while psi.len() < p + 1 {
                    psi.push(0.0);
                }
                TrueTheta { beta, psi }
            }
        }
    }

    /// Between-site variance implied by the heterogeneity level.
    pub fn sigma_b2(&self) -> Result<f64> {
        if self.heterogeneity.kind == HeterogeneityKind::CommonEffect {
            return Ok(0.0);
        }
        heterogeneity_variance(self.heterogeneity.i_squared, self.sigma_eps2)
    }

    /// Substream for `(replicate, site, purpose)` under this scenario's seed.
    pub fn rng(&self, replicate: u32, site: u16, purpose: Purpose) -> ChaCha8Rng {
        substream_rng(self.seed, stream_key(replicate, site, purpose))
    }
}

/// Inverts the heterogeneity identity `I^2 = s_B^2 / (s_B^2 + s_eps^2)`:
/// `s_B^2 = I^2 s_eps^2 / (1 - I^2)`.
pub fn heterogeneity_variance(i_squared: f64, sigma_eps2: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&i_squared) {
        return Err(Error::InvalidScenario(format!(
            "I^2 must lie in [0, 1), got {i_squared}"
        )));
    }
    Ok(i_squared * sigma_eps2 / (1.0 - i_squared))
}

/// Covariate rows in a fixed column layout, shared by site datasets and
/// evaluation cohorts.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariateTable {
    pub names: Vec<String>,
    /// Column-major values.
    pub columns: Vec<Vec<f64>>,
}

impl CovariateTable {
    pub fn n_rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn value(&self, column: usize, row: usize) -> f64 {
        self.columns[column][row]
    }
}

fn covariate_names(setting: Setting, n_covariates: usize) -> Vec<String> {
    match setting {
        Setting::Binary | Setting::Continuous => vec!["x1".into(), "x2".into()],
        Setting::Sparse => vec!["x1".into(), "x2:2".into(), "x2:3".into()],
        Setting::ManyCovariates => (1..=n_covariates).map(|j| format!("x{j}")).collect(),
    }
}

/// Site group by id: sites 3, 6, 9 / sites 1, 4, 7, 10 / sites 2, 5, 8.
fn site_group(site_id: usize) -> u8 {
    (site_id % 3) as u8
}

fn draw_covariate_row(
    setting: Setting,
    n_covariates: usize,
    site_id: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    let group = site_group(site_id);
    match setting {
        Setting::Binary | Setting::Continuous => {
            let (x1, p2): (f64, f64) = match group {
                0 => (Normal::new(5.0, 1.0).unwrap().sample(rng), 0.5),
                1 => (6.0 * Beta::new(4.0, 4.0).unwrap().sample(rng) + 2.0, 0.3),
                _ => (rng.gen_range(2.0..8.0), 0.7),
            };
            vec![x1, f64::from(rng.gen_bool(p2))]
        }
        Setting::Sparse => {
            let (x1, probs): (f64, [f64; 3]) = match group {
                0 => (1.0, [0.0, 0.5, 0.5]),
                1 => (0.0, [0.5, 0.0, 0.5]),
                _ => (
                    f64::from(rng.gen_bool(0.5)),
                    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
                ),
            };
            let u: f64 = rng.gen();
            let level = if u < probs[0] {
                1
            } else if u < probs[0] + probs[1] {
                2
            } else {
                3
            };
            vec![x1, f64::from(level == 2), f64::from(level == 3)]
        }
        Setting::ManyCovariates => {
            let (x1, p2, rate3): (f64, f64, f64) = match group {
                0 => (Normal::new(5.0, 1.0).unwrap().sample(rng), 0.5, 1.0),
                1 => (
                    6.0 * Beta::new(4.0, 4.0).unwrap().sample(rng) + 2.0,
                    0.3,
                    1.7,
                ),
                _ => (rng.gen_range(2.0..8.0), 0.7, 0.7),
            };
            let mut row = vec![
                x1,
                f64::from(rng.gen_bool(p2)),
                Exp::new(rate3).unwrap().sample(rng),
            ];
            for _ in 4..=n_covariates {
                row.push(Normal::new(0.0, 1.0).unwrap().sample(rng));
            }
            row.truncate(n_covariates);
            row
        }
    }
}

/// Covariate matrix for one site.
pub fn gen_covariates(
    setting: Setting,
    n_covariates: usize,
    site_id: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> CovariateTable {
    let names = covariate_names(setting, n_covariates);
    let mut columns = vec![Vec::with_capacity(n); names.len()];
    for _ in 0..n {
        let row = draw_covariate_row(setting, n_covariates, site_id, rng);
        for (col, v) in columns.iter_mut().zip(row) {
            col.push(v);
        }
    }
    CovariateTable { names, columns }
}

/// Per-site propensity coefficients `(a0, a1, a2)` for the binary setting.
/// Scenarios 3-6 draw site-level coefficients once per replicate; scenarios
/// 5-6 zero one coefficient by site parity.
pub fn resolve_propensity(
    confounding_scenario: u8,
    site_id: usize,
    rng: &mut ChaCha8Rng,
) -> Result<[f64; 3]> {
    let odd = site_id % 2 == 1;
    let alpha = match confounding_scenario {
        1 => [0.1, 0.1, 0.1],
        2 => [0.01, 0.01, 0.01],
        3 => [
            rng.gen_range(0.06..0.14),
            rng.gen_range(0.06..0.14),
            rng.gen_range(0.06..0.14),
        ],
        4 => [
            rng.gen_range(0.006..0.014),
            rng.gen_range(0.006..0.014),
            rng.gen_range(0.006..0.014),
        ],
        5 => [
            rng.gen_range(0.3..0.7),
            if odd { 0.0 } else { rng.gen_range(0.06..0.14) },
            if odd { rng.gen_range(0.3..0.7) } else { 0.0 },
        ],
        6 => [
            rng.gen_range(0.03..0.07),
            if odd { 0.0 } else { rng.gen_range(0.006..0.014) },
            if odd { rng.gen_range(0.03..0.07) } else { 0.0 },
        ],
        other => {
            return Err(Error::InvalidScenario(format!(
                "confounding scenario {other} outside 1..=6"
            )))
        }
    };
    Ok(alpha)
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One treatment draw.
pub fn gen_treatment(
    setting: Setting,
    alpha: Option<&[f64; 3]>,
    x1: f64,
    x2: f64,
    rng: &mut ChaCha8Rng,
) -> f64 {
    match setting {
        Setting::Binary => {
            let a = alpha.expect("binary setting resolves propensity coefficients");
            let p = logistic(a[0] + a[1] * x1 + a[2] * x2);
            f64::from(rng.gen_bool(p))
        }
        Setting::Continuous => Normal::new(x1, 1.0).unwrap().sample(rng),
        Setting::Sparse | Setting::ManyCovariates => f64::from(rng.gen_bool(0.5)),
    }
}

/// Site-level parameters under the heterogeneity structure.
pub fn gen_site_parameters(
    heterogeneity: Heterogeneity,
    theta: &TrueTheta,
    sigma_b2: f64,
    rng: &mut ChaCha8Rng,
) -> TrueTheta {
    let sigma_b = sigma_b2.sqrt();
    let perturb = |v: f64, rng: &mut ChaCha8Rng| {
        if sigma_b == 0.0 {
            v
        } else {
            Normal::new(v, sigma_b).unwrap().sample(rng)
        }
    };
    match heterogeneity.kind {
        HeterogeneityKind::CommonEffect => theta.clone(),
        HeterogeneityKind::VaryingEffects => TrueTheta {
            beta: theta.beta.iter().map(|&b| perturb(b, rng)).collect(),
            psi: theta.psi.iter().map(|&p| perturb(p, rng)).collect(),
        },
        HeterogeneityKind::CommonRule => {
            let beta = theta.beta.iter().map(|&b| perturb(b, rng)).collect();
            let psi1 = perturb(theta.psi[1], rng);
            let mut psi = theta.psi.clone();
            psi[0] = -5.0 * psi1;
            psi[1] = psi1;
            TrueTheta { beta, psi }
        }
    }
}

/// Term resolution against a covariate table: `None` means the intercept.
#[derive(Debug, Clone)]
pub struct ResolvedTerms {
    pub tf: Vec<Option<usize>>,
    pub lin: Vec<Option<usize>>,
    pub quad: Vec<Option<usize>>,
}

pub fn resolve_terms(spec: &ModelSpec, table: &CovariateTable) -> Result<ResolvedTerms> {
    let resolve = |terms: &[Term]| -> Result<Vec<Option<usize>>> {
        terms
            .iter()
            .map(|t| match t.column_name() {
                None => Ok(None),
                Some(name) => table
                    .column_index(&name)
                    .map(Some)
                    .ok_or(Error::MissingColumn(name)),
            })
            .collect()
    };
    Ok(ResolvedTerms {
        tf: resolve(&spec.treatment_free_terms)?,
        lin: resolve(&spec.blip_terms_linear)?,
        quad: resolve(&spec.blip_terms_quadratic)?,
    })
}

fn block_value(coefs: &[f64], terms: &[Option<usize>], table: &CovariateTable, row: usize) -> f64 {
    coefs
        .iter()
        .zip(terms)
        .map(|(c, t)| c * t.map_or(1.0, |col| table.value(col, row)))
        .sum()
}

/// Blip value `gamma(a, x; psi)` for one row.
pub fn blip_value(
    theta: &TrueTheta,
    resolved: &ResolvedTerms,
    table: &CovariateTable,
    row: usize,
    a: f64,
) -> f64 {
    let q1 = resolved.lin.len();
    let lin = block_value(&theta.psi[..q1], &resolved.lin, table, row);
    let quad = block_value(&theta.psi[q1..], &resolved.quad, table, row);
    a * lin + a * a * quad
}

/// Noiseless conditional mean `E(Y | x, a)` for one row.
pub fn conditional_mean(
    theta: &TrueTheta,
    resolved: &ResolvedTerms,
    table: &CovariateTable,
    row: usize,
    a: f64,
) -> f64 {
    block_value(&theta.beta, &resolved.tf, table, row) + blip_value(theta, resolved, table, row, a)
}

/// Everything one replicate generates, including the site-level parameter
/// and propensity draws for the run log.
#[derive(Debug, Clone)]
pub struct ReplicateData {
    pub sites: Vec<SiteDataset>,
    pub site_params: Vec<TrueTheta>,
    pub site_alphas: Vec<Option<[f64; 3]>>,
    pub site_sizes: Vec<usize>,
}

/// Generates all sites of one replicate.
pub fn generate_replicate(scenario: &Scenario, replicate: u32) -> Result<ReplicateData> {
    scenario.validate()?;
    let spec = scenario.model_spec();
    let theta = scenario.resolved_theta();
    let sigma_b2 = scenario.sigma_b2()?;
    let sigma_eps = scenario.sigma_eps2.sqrt();

    let mut sites = Vec::with_capacity(scenario.k_sites);
    let mut site_params = Vec::with_capacity(scenario.k_sites);
    let mut site_alphas = Vec::with_capacity(scenario.k_sites);
    let mut site_sizes = Vec::with_capacity(scenario.k_sites);

    for site_id in 1..=scenario.k_sites {
        let site16 = site_id as u16;

        let n = {
            let mut rng = scenario.rng(replicate, site16, Purpose::SiteSize);
            let lo = 0.6 * scenario.n_mean as f64;
            let hi = 1.4 * scenario.n_mean as f64;
            (rng.gen_range(lo..hi).round() as usize).max(10)
        };
        site_sizes.push(n);

        let theta_i = {
            let mut rng = scenario.rng(replicate, site16, Purpose::SiteParams);
            gen_site_parameters(scenario.heterogeneity, &theta, sigma_b2, &mut rng)
        };

        let alpha = if scenario.setting == Setting::Binary {
            let mut rng = scenario.rng(replicate, site16, Purpose::Propensity);
            Some(resolve_propensity(
                scenario.confounding_scenario,
                site_id,
                &mut rng,
            )?)
        } else {
            None
        };

        let table = {
            let mut rng = scenario.rng(replicate, site16, Purpose::Covariates);
            gen_covariates(
                scenario.setting,
                scenario.n_covariates,
                site_id,
                n,
                &mut rng,
            )
        };
        let resolved = resolve_terms(&spec, &table)?;

        let treatment: Vec<f64> = {
            let mut rng = scenario.rng(replicate, site16, Purpose::Treatment);
            (0..n)
                .map(|row| {
                    let x1 = table.value(0, row);
                    let x2 = table.value(1, row);
                    gen_treatment(scenario.setting, alpha.as_ref(), x1, x2, &mut rng)
                })
                .collect()
        };

        let outcome: Vec<f64> = {
            let mut rng = scenario.rng(replicate, site16, Purpose::Noise);
            (0..n)
                .map(|row| {
                    let mean = conditional_mean(&theta_i, &resolved, &table, row, treatment[row]);
                    mean + sigma_eps * Normal::new(0.0, 1.0).unwrap().sample(&mut rng)
                })
                .collect()
        };

        let named: Vec<(String, Vec<f64>)> = table
            .names
            .iter()
            .cloned()
            .zip(table.columns.iter().cloned())
            .collect();
        sites.push(SiteDataset::new(
            format!("site_{site_id:02}"),
            named,
            treatment,
            outcome,
        )?);
        site_params.push(theta_i);
        site_alphas.push(alpha);
    }

    Ok(ReplicateData {
        sites,
        site_params,
        site_alphas,
        site_sizes,
    })
}

/// Draws an evaluation cohort from the scenario's covariate-law mixture:
/// each row picks a site uniformly and then draws from that site's law.
pub fn gen_cohort(scenario: &Scenario, size: usize, seed: u64) -> CovariateTable {
    let mut rng = substream_rng(seed, stream_key(u32::MAX, 0, Purpose::Cohort));
    let names = covariate_names(scenario.setting, scenario.n_covariates);
    let mut columns = vec![Vec::with_capacity(size); names.len()];
    for _ in 0..size {
        let site_id = rng.gen_range(1..=scenario.k_sites);
        let row = draw_covariate_row(scenario.setting, scenario.n_covariates, site_id, &mut rng);
        for (col, v) in columns.iter_mut().zip(row) {
            col.push(v);
        }
    }
    CovariateTable { names, columns }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(setting: Setting) -> Scenario {
        Scenario {
            setting,
            n_covariates: 10,
            k_sites: 10,
            n_mean: 50,
            confounding_scenario: 1,
            heterogeneity: Heterogeneity::common_effect(),
            true_theta: None,
            sigma_eps2: 0.25,
            seed: 42,
        }
    }

    #[test]
    fn heterogeneity_conversion_is_exact() {
        assert_eq!(heterogeneity_variance(0.2, 0.25).unwrap(), 0.0625);
        assert_eq!(heterogeneity_variance(0.0, 0.25).unwrap(), 0.0);
        let v01 = heterogeneity_variance(0.1, 0.25).unwrap();
        assert!((v01 - 0.25 / 9.0).abs() <= 2.0 * f64::EPSILON * v01);
        assert_eq!(heterogeneity_variance(0.3, 0.25).unwrap(), 0.25 * 0.3 / 0.7);
        assert!(heterogeneity_variance(1.0, 0.25).is_err());
    }

    #[test]
    fn binary_group_laws_have_the_right_support() {
        // Site 1 (group 1): x1 = 6 Beta(4,4) + 2 lies in [2, 8].
        let mut rng = substream_rng(1, 0);
        let table = gen_covariates(Setting::Binary, 2, 1, 4000, &mut rng);
        for &v in &table.columns[0] {
            assert!((2.0..=8.0).contains(&v), "x1 = {v}");
        }
        // Site 3 (group 0): x1 is normal around 5.
        let table = gen_covariates(Setting::Binary, 2, 3, 4000, &mut rng);
        let m = crate::mcmc::mean(&table.columns[0]);
        assert!((m - 5.0).abs() < 0.1, "mean {m}");
    }

    #[test]
    fn sparse_site_three_has_constant_x1_and_no_reference_level() {
        let mut rng = substream_rng(2, 0);
        let table = gen_covariates(Setting::Sparse, 3, 3, 500, &mut rng);
        assert!(table.columns[0].iter().all(|&v| v == 1.0));
        for row in 0..table.n_rows() {
            let sum = table.value(1, row) + table.value(2, row);
            assert_eq!(sum, 1.0, "reference level must be absent");
        }
    }

    #[test]
    fn many_covariates_x3_is_nonnegative_exponential() {
        let mut rng = substream_rng(3, 0);
        let table = gen_covariates(Setting::ManyCovariates, 10, 2, 4000, &mut rng);
        assert_eq!(table.names.len(), 10);
        assert!(table.columns[2].iter().all(|&v| v >= 0.0));
        // Exp(0.7) has mean 1/0.7.
        let m = crate::mcmc::mean(&table.columns[2]);
        assert!((m - 1.0 / 0.7).abs() < 0.1, "mean {m}");
    }

    #[test]
    fn scenario_one_propensity_matches_the_logistic_formula() {
        // alpha = (0.1, 0.1, 0.1), x = (5, 1): P(A=1) = logistic(0.7).
        let mut rng = substream_rng(4, 0);
        let alpha = resolve_propensity(1, 1, &mut rng).unwrap();
        assert_eq!(alpha, [0.1, 0.1, 0.1]);
        let p_expected = logistic(0.7);
        assert!((p_expected - 0.6682).abs() < 1e-4);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            if gen_treatment(Setting::Binary, Some(&alpha), 5.0, 1.0, &mut rng) == 1.0 {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        let se = (p_expected * (1.0 - p_expected) / n as f64).sqrt();
        assert!(
            (p_hat - p_expected).abs() < 4.0 * se,
            "{p_hat} vs {p_expected}"
        );
    }

    #[test]
    fn scenario_six_zeroes_coefficients_by_site_parity() {
        let mut rng = substream_rng(5, 0);
        for _ in 0..50 {
            let odd = resolve_propensity(6, 3, &mut rng).unwrap();
            assert_eq!(odd[1], 0.0);
            assert!((0.03..0.07).contains(&odd[2]));
            assert!((0.03..0.07).contains(&odd[0]));
            let even = resolve_propensity(6, 4, &mut rng).unwrap();
            assert!((0.006..0.014).contains(&even[1]));
            assert_eq!(even[2], 0.0);
        }
    }

    #[test]
    fn sparse_setting_treatment_ignores_covariates() {
        let mut rng = substream_rng(6, 0);
        let n = 100_000;
        let mut hits = 0usize;
        for _ in 0..n {
            if gen_treatment(Setting::Sparse, None, 123.0, -55.0, &mut rng) == 1.0 {
                hits += 1;
            }
        }
        let p_hat = hits as f64 / n as f64;
        assert!((p_hat - 0.5).abs() < 4.0 * (0.25 / n as f64).sqrt());
    }

    #[test]
    fn common_effect_copies_theta_exactly() {
        let theta = scenario(Setting::Binary).resolved_theta();
        let mut rng = substream_rng(7, 0);
        let site = gen_site_parameters(Heterogeneity::common_effect(), &theta, 0.0, &mut rng);
        assert_eq!(site, theta);
    }

    #[test]
    fn common_rule_pins_the_ratio_at_minus_five() {
        let theta = scenario(Setting::Binary).resolved_theta();
        let mut rng = substream_rng(8, 0);
        for _ in 0..200 {
            let site = gen_site_parameters(
                Heterogeneity {
                    kind: HeterogeneityKind::CommonRule,
                    i_squared: 0.3,
                },
                &theta,
                heterogeneity_variance(0.3, 0.25).unwrap(),
                &mut rng,
            );
            assert_eq!(site.psi[0], -5.0 * site.psi[1]);
        }
    }

    #[test]
    fn varying_effects_match_the_target_variance() {
        let theta = scenario(Setting::Binary).resolved_theta();
        let sigma_b2 = heterogeneity_variance(0.1, 0.25).unwrap();
        let mut rng = substream_rng(9, 0);
        let draws: Vec<f64> = (0..10_000)
            .map(|_| {
                gen_site_parameters(
                    Heterogeneity::varying_effects(0.1),
                    &theta,
                    sigma_b2,
                    &mut rng,
                )
                .psi[0]
            })
            .collect();
        let v = crate::mcmc::sample_sd(&draws).powi(2);
        assert!(
            (v - sigma_b2).abs() / sigma_b2 < 0.03,
            "variance {v} vs {sigma_b2}"
        );
    }

    #[test]
    fn binary_conditional_mean_matches_hand_expansion() {
        // x = (5, 1), a = 1, common defaults: y = 4 + 5 + 1 + (2.5 - 2.5) = 10.
        let sc = scenario(Setting::Binary);
        let theta = sc.resolved_theta();
        let table = CovariateTable {
            names: vec!["x1".into(), "x2".into()],
            columns: vec![vec![5.0], vec![1.0]],
        };
        let resolved = resolve_terms(&sc.model_spec(), &table).unwrap();
        assert_eq!(conditional_mean(&theta, &resolved, &table, 0, 1.0), 10.0);
        // a = 0 leaves only the treatment-free part.
        assert_eq!(conditional_mean(&theta, &resolved, &table, 0, 0.0), 10.0);
        let table2 = CovariateTable {
            names: vec!["x1".into(), "x2".into()],
            columns: vec![vec![2.0], vec![0.0]],
        };
        assert_eq!(
            conditional_mean(&theta, &resolved, &table2, 0, 0.0),
            4.0 + 2.0
        );
    }

    #[test]
    fn continuous_blip_is_quadratic_in_the_dose() {
        let sc = scenario(Setting::Continuous);
        let theta = sc.resolved_theta();
        let table = CovariateTable {
            names: vec!["x1".into(), "x2".into()],
            columns: vec![vec![3.0], vec![0.0]],
        };
        let resolved = resolve_terms(&sc.model_spec(), &table).unwrap();
        // gamma(a) = a(1 + 3) - 2 a^2; maximized at a = 1.
        let g = |a: f64| blip_value(&theta, &resolved, &table, 0, a);
        assert_eq!(g(0.0), 0.0);
        assert_eq!(g(1.0), 4.0 - 2.0);
        assert!(g(1.0) > g(0.9) && g(1.0) > g(1.1));
    }

    #[test]
    fn noise_covariates_do_not_enter_the_blip() {
        let sc = scenario(Setting::ManyCovariates);
        let theta = sc.resolved_theta();
        assert_eq!(theta.psi.len(), 11);
        assert!(theta.psi[4..].iter().all(|&p| p == 0.0));
        let spec = sc.model_spec();
        let mut cols = vec![vec![1.0]; 10];
        cols[4] = vec![100.0];
        let t1 = CovariateTable {
            names: (1..=10).map(|j| format!("x{j}")).collect(),
            columns: cols.clone(),
        };
        cols[4] = vec![-100.0];
        let t2 = CovariateTable {
            names: t1.names.clone(),
            columns: cols,
        };
        let r1 = resolve_terms(&spec, &t1).unwrap();
        let r2 = resolve_terms(&spec, &t2).unwrap();
        assert_eq!(
            blip_value(&theta, &r1, &t1, 0, 1.0),
            blip_value(&theta, &r2, &t2, 0, 1.0)
        );
    }

    #[test]
    fn replicates_are_bit_reproducible() {
        let sc = scenario(Setting::Binary);
        let r1 = generate_replicate(&sc, 3).unwrap();
        let r2 = generate_replicate(&sc, 3).unwrap();
        assert_eq!(r1.sites.len(), r2.sites.len());
        for (a, b) in r1.sites.iter().zip(&r2.sites) {
            assert_eq!(a.outcome, b.outcome);
            assert_eq!(a.treatment, b.treatment);
            assert_eq!(a.column("x1").unwrap(), b.column("x1").unwrap());
        }
        let r3 = generate_replicate(&sc, 4).unwrap();
        assert_ne!(r1.sites[0].outcome, r3.sites[0].outcome);
    }

    #[test]
    fn site_sizes_stay_in_range_with_a_floor() {
        let sc = scenario(Setting::Binary);
        for rep in 0..20 {
            let data = generate_replicate(&sc, rep).unwrap();
            for &n in &data.site_sizes {
                assert!((30..=70).contains(&n), "n = {n}");
            }
        }
    }

    #[test]
    fn sparse_sites_trigger_the_documented_dropped_columns() {
        let mut sc = scenario(Setting::Sparse);
        sc.n_mean = 200;
        let data = generate_replicate(&sc, 0).unwrap();
        let spec = sc.model_spec();
        // Site 3 (group 0): x1 constant 1, reference level absent.
        let site3 = &data.sites[2];
        let design = crate::model::build_design_matrix(&spec, site3).unwrap();
        let est =
            crate::stage_one::detect_estimable(&design.matrix, crate::stage_one::RANK_TOLERANCE)
                .unwrap();
        // Columns: [1, x1, x2:2, x2:3 | a, a*x1, a*x2:2, a*x2:3].
        assert_eq!(est.dropped, vec![1, 3, 5, 7]);
        // Site 1 (group 1): x1 constant 0 and level 2 absent.
        let site1 = &data.sites[0];
        let design = crate::model::build_design_matrix(&spec, site1).unwrap();
        let est =
            crate::stage_one::detect_estimable(&design.matrix, crate::stage_one::RANK_TOLERANCE)
                .unwrap();
        assert_eq!(est.dropped, vec![1, 2, 5, 6]);
    }

    #[test]
    fn scenario_parses_from_toml() {
        let text = r#"
            setting = "many_covariates"
            n_covariates = 10
            n_mean = 200
            heterogeneity = { kind = "varying_effects", i_squared = 0.1 }
            seed = 7
        "#;
        let sc = Scenario::from_toml_str(text).unwrap();
        assert_eq!(sc.setting, Setting::ManyCovariates);
        assert_eq!(sc.k_sites, 10);
        assert_eq!(sc.resolved_theta().psi[2], 2.0);
    }

    #[test]
    fn cohort_mixes_site_laws() {
        let sc = scenario(Setting::Sparse);
        let cohort = gen_cohort(&sc, 5000, sc.seed);
        // The mixture contains both x1 = 0 sites, x1 = 1 sites, and mixed.
        let ones = cohort.columns[0].iter().filter(|&&v| v == 1.0).count();
        let zeros = cohort.columns[0].iter().filter(|&&v| v == 0.0).count();
        assert_eq!(ones + zeros, 5000);
        // Expected share of ones: 3/10 + 3/10 * 0.5 = 0.45.
        let share = ones as f64 / 5000.0;
        assert!((share - 0.45).abs() < 0.05, "share {share}");
        // The reference level appears in the cohort (group 1 and 2 sites).
        let at_ref = (0..cohort.n_rows())
            .filter(|&r| cohort.value(1, r) == 0.0 && cohort.value(2, r) == 0.0)
            .count();
        assert!(at_ref > 0);
    }
}
