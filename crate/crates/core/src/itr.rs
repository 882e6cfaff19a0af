//! Rule extraction and value-function evaluation.
//!
//! A binary rule treats when the blip is positive: `d(x) = I(psi' x > 0)`,
//! with ties resolved to "do not treat". A continuous rule doses at the
//! maximizer of the quadratic blip, `a = -psi1' x / (2 psi2' x)`, clipped to
//! the admissible interval; rows where the blip is not concave fall back to
//! the better endpoint and are flagged rather than silently accepted.
//!
//! The value function `V(d)` of a rule is the population mean of the true
//! conditional mean outcome at `(x, d(x))` over a fresh covariate cohort; no
//! residual noise enters because it cancels in the difference
//! `dVF = V(d_true) - V(d_estimated)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelSpec, Term, TreatmentKind};
use crate::simgen::{
    conditional_mean, gen_cohort, resolve_terms, CovariateTable, Scenario, TrueTheta,
};
use crate::stage_two::PosteriorSummaryDoc;

/// Default admissible dose interval when the caller supplies none.
pub const DEFAULT_DOSE_BOUNDS: (f64, f64) = (-100.0, 100.0);

/// A treatment rule: point estimates of the blip parameters plus the term
/// structure needed to evaluate them on covariate rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rule {
    pub treatment_kind: TreatmentKind,
    pub blip_terms_linear: Vec<Term>,
    pub blip_terms_quadratic: Vec<Term>,
    /// Flattened blip coefficients (linear block, then quadratic block).
    pub psi_point: Vec<f64>,
}

impl Rule {
    pub fn from_spec(spec: &ModelSpec, psi_point: Vec<f64>) -> Result<Rule> {
        if psi_point.len() != spec.n_blip() {
            return Err(Error::RuleMismatch(format!(
                "rule has {} coefficients but the model has {} blip parameters",
                psi_point.len(),
                spec.n_blip()
            )));
        }
        Ok(Rule {
            treatment_kind: spec.treatment_kind,
            blip_terms_linear: spec.blip_terms_linear.clone(),
            blip_terms_quadratic: spec.blip_terms_quadratic.clone(),
            psi_point,
        })
    }

    /// Builds a rule from a pooling summary document: the configured point
    /// estimator per component, unselected horseshoe components set to zero.
    pub fn from_summary_doc(
        spec: &ModelSpec,
        doc: &PosteriorSummaryDoc,
        use_median: bool,
    ) -> Result<Rule> {
        let expected = spec.psi_labels();
        if doc.psi_labels != expected {
            return Err(Error::RuleMismatch(format!(
                "summary labels {:?} do not match the model's blip components {:?}",
                doc.psi_labels, expected
            )));
        }
        Rule::from_spec(spec, doc.rule_point_estimates(use_median))
    }

    /// Resolves the rule's terms against a covariate table once, for
    /// repeated row evaluation.
    pub fn prepare<'r>(&'r self, table: &CovariateTable) -> Result<PreparedRule<'r>> {
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
        Ok(PreparedRule {
            rule: self,
            lin: resolve(&self.blip_terms_linear)?,
            quad: resolve(&self.blip_terms_quadratic)?,
        })
    }
}

/// A rule bound to a covariate table's column layout.
pub struct PreparedRule<'r> {
    rule: &'r Rule,
    lin: Vec<Option<usize>>,
    quad: Vec<Option<usize>>,
}

/// Outcome of one dose decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseDecision {
    pub dose: f64,
    /// The unconstrained maximizer fell outside the bounds.
    pub clipped: bool,
    /// The blip was concave at this row; when false the dose is the better
    /// endpoint of the interval.
    pub concave: bool,
}

impl PreparedRule<'_> {
    fn linear_form(&self, table: &CovariateTable, row: usize) -> f64 {
        let q1 = self.lin.len();
        self.rule.psi_point[..q1]
            .iter()
            .zip(&self.lin)
            .map(|(c, t)| c * t.map_or(1.0, |col| table.value(col, row)))
            .sum()
    }

    fn quadratic_form(&self, table: &CovariateTable, row: usize) -> f64 {
        let q1 = self.lin.len();
        self.rule.psi_point[q1..]
            .iter()
            .zip(&self.quad)
            .map(|(c, t)| c * t.map_or(1.0, |col| table.value(col, row)))
            .sum()
    }

    /// Binary decision: treat iff `psi' x > 0` (strict; ties mean no
    /// treatment).
    pub fn decide_binary(&self, table: &CovariateTable, row: usize) -> Result<u8> {
        if self.rule.treatment_kind != TreatmentKind::Binary {
            return Err(Error::RuleMismatch(
                "binary decision requested from a dose rule".into(),
            ));
        }
        Ok(u8::from(self.linear_form(table, row) > 0.0))
    }

    /// Dose decision: the blip maximizer clipped to `[lo, hi]`; on a
    /// concavity failure the better endpoint, flagged.
    pub fn decide_dose(
        &self,
        table: &CovariateTable,
        row: usize,
        bounds: (f64, f64),
    ) -> Result<DoseDecision> {
        if self.rule.treatment_kind != TreatmentKind::ContinuousQuadratic {
            return Err(Error::RuleMismatch(
                "dose decision requested from a binary rule".into(),
            ));
        }
        let (lo, hi) = bounds;
        assert!(lo < hi, "dose bounds must satisfy lo < hi");
        let num = self.linear_form(table, row);
        let den = self.quadratic_form(table, row);
        if num == 0.0 && den == 0.0 {
            return Err(Error::UndefinedRule);
        }
        if den < 0.0 {
            let unconstrained = -num / (2.0 * den);
            let dose = unconstrained.clamp(lo, hi);
            Ok(DoseDecision {
                dose,
                clipped: dose != unconstrained,
                concave: true,
            })
        } else {
            let blip = |a: f64| num * a + den * a * a;
            let dose = if blip(lo) >= blip(hi) { lo } else { hi };
            Ok(DoseDecision {
                dose,
                clipped: false,
                concave: false,
            })
        }
    }
}

/// Value function, value difference, and decision diagnostics of an
/// estimated rule against a truth-known cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEvaluation {
    /// Mean outcome under the true optimal rule.
    pub value_true: f64,
    /// Mean outcome under the estimated rule.
    pub value_estimate: f64,
    /// `V(d_true) - V(d_estimated)`; nonnegative when evaluated against the
    /// exact conditional mean.
    pub dvf: f64,
    pub cohort_size: usize,
    pub seed: u64,
    /// Rows where the estimated rule's blip was not concave (dose rules).
    pub concavity_violations: usize,
    /// Rows where the estimated dose hit a bound.
    pub clipped_doses: usize,
}

/// Evaluates an estimated rule against the scenario's truth on a fresh
/// cohort drawn from the covariate-law mixture. Both rules are evaluated on
/// the identical cohort; outcomes use the noiseless conditional mean.
pub fn evaluate_rule(
    rule_est: &Rule,
    truth: &Scenario,
    cohort_size: usize,
    seed: u64,
    dose_bounds: Option<(f64, f64)>,
) -> Result<RuleEvaluation> {
    truth.validate()?;
    let cohort = gen_cohort(truth, cohort_size, seed);
    evaluate_rule_on_cohort(rule_est, truth, &cohort, seed, dose_bounds)
}

/// As [`evaluate_rule`], but on a caller-supplied cohort so replicated
/// studies can evaluate every rule against the same population.
pub fn evaluate_rule_on_cohort(
    rule_est: &Rule,
    truth: &Scenario,
    cohort: &CovariateTable,
    seed: u64,
    dose_bounds: Option<(f64, f64)>,
) -> Result<RuleEvaluation> {
    let spec = truth.model_spec();
    let theta: TrueTheta = truth.resolved_theta();
    let rule_true = Rule::from_spec(&spec, theta.psi.clone())?;

    let resolved = resolve_terms(&spec, cohort)?;
    let est = rule_est.prepare(cohort)?;
    let opt = rule_true.prepare(cohort)?;
    let bounds = dose_bounds.unwrap_or(DEFAULT_DOSE_BOUNDS);

    let mut value_true = 0.0;
    let mut value_est = 0.0;
    let mut concavity_violations = 0usize;
    let mut clipped = 0usize;
    for row in 0..cohort.n_rows() {
        let (a_true, a_est) = match spec.treatment_kind {
            TreatmentKind::Binary => (
                f64::from(opt.decide_binary(cohort, row)?),
                f64::from(est.decide_binary(cohort, row)?),
            ),
            TreatmentKind::ContinuousQuadratic => {
                let d_true = opt.decide_dose(cohort, row, bounds)?;
                let d_est = est.decide_dose(cohort, row, bounds)?;
                if !d_est.concave {
                    concavity_violations += 1;
                }
                if d_est.clipped {
                    clipped += 1;
                }
                (d_true.dose, d_est.dose)
            }
        };
        value_true += conditional_mean(&theta, &resolved, cohort, row, a_true);
        value_est += conditional_mean(&theta, &resolved, cohort, row, a_est);
    }
    let n = cohort.n_rows() as f64;
    value_true /= n;
    value_est /= n;

    Ok(RuleEvaluation {
        value_true,
        value_estimate: value_est,
        dvf: value_true - value_est,
        cohort_size: cohort.n_rows(),
        seed,
        concavity_violations,
        clipped_doses: clipped,
    })
}

/// Per-draw dose distribution for one covariate row: applies the dose rule
/// under each posterior draw of the blip parameters.
pub fn dose_per_draw(
    spec: &ModelSpec,
    psi_draws: &[Vec<f64>],
    table: &CovariateTable,
    row: usize,
    bounds: (f64, f64),
) -> Result<Vec<f64>> {
    let mut doses = Vec::with_capacity(psi_draws.len());
    for draw in psi_draws {
        let rule = Rule::from_spec(spec, draw.clone())?;
        let prepared = rule.prepare(table)?;
        doses.push(prepared.decide_dose(table, row, bounds)?.dose);
    }
    Ok(doses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{Heterogeneity, Setting};
    use rand::Rng;

    fn table(names: &[&str], rows: &[Vec<f64>]) -> CovariateTable {
        let mut columns = vec![Vec::new(); names.len()];
        for row in rows {
            for (c, v) in columns.iter_mut().zip(row) {
                c.push(*v);
            }
        }
        CovariateTable {
            names: names.iter().map(|s| s.to_string()).collect(),
            columns,
        }
    }

    fn binary_rule(psi: Vec<f64>) -> Rule {
        Rule {
            treatment_kind: TreatmentKind::Binary,
            blip_terms_linear: vec![Term::Intercept, Term::Numeric("x1".into())],
            blip_terms_quadratic: vec![],
            psi_point: psi,
        }
    }

    fn dose_rule(psi: Vec<f64>) -> Rule {
        Rule {
            treatment_kind: TreatmentKind::ContinuousQuadratic,
            blip_terms_linear: vec![Term::Intercept, Term::Numeric("x1".into())],
            blip_terms_quadratic: vec![Term::Intercept],
            psi_point: psi,
        }
    }

    #[test]
    fn binary_decisions_reproduce_the_threshold_rule() {
        // psi = (2.5, -0.5): treat iff x1 < 5.
        let rule = binary_rule(vec![2.5, -0.5]);
        let t = table(&["x1"], &[vec![4.0], vec![6.0], vec![5.0]]);
        let p = rule.prepare(&t).unwrap();
        assert_eq!(p.decide_binary(&t, 0).unwrap(), 1);
        assert_eq!(p.decide_binary(&t, 1).unwrap(), 0);
        // Tie at x1 = 5: do not treat.
        assert_eq!(p.decide_binary(&t, 2).unwrap(), 0);
    }

    #[test]
    fn binary_decisions_are_invariant_to_positive_scaling() {
        let rule = binary_rule(vec![2.5, -0.5]);
        let scaled = binary_rule(vec![2.5 * 37.0, -0.5 * 37.0]);
        let rows: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64 * 0.01]).collect();
        let t = table(&["x1"], &rows);
        let p1 = rule.prepare(&t).unwrap();
        let p2 = scaled.prepare(&t).unwrap();
        for row in 0..t.n_rows() {
            assert_eq!(
                p1.decide_binary(&t, row).unwrap(),
                p2.decide_binary(&t, row).unwrap()
            );
        }
    }

    #[test]
    fn dose_reproduces_the_quadratic_maximizer() {
        // psi_lin = (1, 1) over (1, x1), psi_quad = -2: dose = (1 + x1) / 4.
        let rule = dose_rule(vec![1.0, 1.0, -2.0]);
        let t = table(&["x1"], &[vec![3.0], vec![0.0], vec![7.0]]);
        let p = rule.prepare(&t).unwrap();
        let d = p.decide_dose(&t, 0, (-10.0, 10.0)).unwrap();
        assert_eq!(d.dose, 1.0);
        assert!(d.concave && !d.clipped);
        assert_eq!(p.decide_dose(&t, 1, (-10.0, 10.0)).unwrap().dose, 0.25);
        assert_eq!(p.decide_dose(&t, 2, (-10.0, 10.0)).unwrap().dose, 2.0);
    }

    #[test]
    fn intercept_only_dose_is_constant() {
        // psi_lin = 2, psi_quad = -0.5: dose = -2 / (2 * -0.5) = 2 for all x.
        let rule = Rule {
            treatment_kind: TreatmentKind::ContinuousQuadratic,
            blip_terms_linear: vec![Term::Intercept],
            blip_terms_quadratic: vec![Term::Intercept],
            psi_point: vec![2.0, -0.5],
        };
        let t = table(&["x1"], &[vec![-3.0], vec![42.0]]);
        let p = rule.prepare(&t).unwrap();
        for row in 0..2 {
            assert_eq!(p.decide_dose(&t, row, (-10.0, 10.0)).unwrap().dose, 2.0);
        }
    }

    #[test]
    fn doses_clip_to_bounds_and_flag_it() {
        let rule = dose_rule(vec![1.0, 1.0, -2.0]);
        let t = table(&["x1"], &[vec![3.0]]); // unconstrained dose 1.0
        let p = rule.prepare(&t).unwrap();
        let d = p.decide_dose(&t, 0, (1.5, 5.0)).unwrap();
        assert_eq!(d.dose, 1.5);
        assert!(d.clipped);
        let d = p.decide_dose(&t, 0, (-5.0, 0.5)).unwrap();
        assert_eq!(d.dose, 0.5);
        assert!(d.clipped);
    }

    #[test]
    fn concavity_failure_returns_the_better_endpoint_and_flags() {
        // Convex blip (psi_quad > 0): the upper endpoint wins here.
        let rule = dose_rule(vec![1.0, 0.0, 0.5]);
        let t = table(&["x1"], &[vec![0.0]]);
        let p = rule.prepare(&t).unwrap();
        let d = p.decide_dose(&t, 0, (-1.0, 3.0)).unwrap();
        assert!(!d.concave);
        assert_eq!(d.dose, 3.0);
        // Linear blip with negative slope: the lower endpoint.
        let rule = dose_rule(vec![-1.0, 0.0, 0.0]);
        let p = rule.prepare(&t).unwrap();
        let d = p.decide_dose(&t, 0, (-1.0, 3.0)).unwrap();
        assert!(!d.concave);
        assert_eq!(d.dose, -1.0);
    }

    #[test]
    fn zero_blip_is_an_undefined_rule() {
        let rule = dose_rule(vec![0.0, 0.0, 0.0]);
        let t = table(&["x1"], &[vec![1.0]]);
        let p = rule.prepare(&t).unwrap();
        assert!(matches!(
            p.decide_dose(&t, 0, (-1.0, 1.0)),
            Err(Error::UndefinedRule)
        ));
    }

    fn binary_scenario() -> Scenario {
        Scenario {
            setting: Setting::Binary,
            n_covariates: 10,
            k_sites: 10,
            n_mean: 200,
            confounding_scenario: 1,
            heterogeneity: Heterogeneity::common_effect(),
            true_theta: None,
            sigma_eps2: 0.25,
            seed: 9,
        }
    }

    #[test]
    fn true_rule_has_zero_dvf_exactly() {
        let sc = binary_scenario();
        let spec = sc.model_spec();
        let rule = Rule::from_spec(&spec, sc.resolved_theta().psi).unwrap();
        let eval = evaluate_rule(&rule, &sc, 20_000, 1, None).unwrap();
        assert_eq!(eval.dvf, 0.0);
        assert_eq!(eval.value_true, eval.value_estimate);
    }

    /// Deliberately wrong rule I(x1 < 4): its value loss is
    /// E[(2.5 - 0.5 X1) 1{4 <= X1 < 5}] over the cohort mixture, checked
    /// against an independent brute-force oracle on fresh draws.
    #[test]
    fn wrong_rule_dvf_matches_brute_force_oracle() {
        let sc = binary_scenario();
        let spec = sc.model_spec();
        // I(x1 < 4) as a linear rule: 2 - 0.5 x1 > 0.
        let wrong = Rule::from_spec(&spec, vec![2.0, -0.5]).unwrap();
        let eval = evaluate_rule(&wrong, &sc, 400_000, 2, None).unwrap();

        // Oracle: fresh mixture draws, direct expectation of the lost blip.
        let mut rng = crate::mcmc::substream_rng(555, 0);
        let n_oracle = 2_000_000usize;
        let mut acc = 0.0;
        let mut acc2 = 0.0;
        for _ in 0..n_oracle {
            let site = rng.gen_range(1..=sc.k_sites);
            let x1 = match site % 3 {
                0 => rand_distr::Distribution::sample(
                    &rand_distr::Normal::new(5.0, 1.0).unwrap(),
                    &mut rng,
                ),
                1 => {
                    6.0 * rand_distr::Distribution::sample(
                        &rand_distr::Beta::new(4.0, 4.0).unwrap(),
                        &mut rng,
                    ) + 2.0
                }
                _ => rng.gen_range(2.0..8.0),
            };
            let blip: f64 = 2.5 - 0.5 * x1;
            let loss = if (4.0..5.0).contains(&x1) { blip } else { 0.0 };
            acc += loss;
            acc2 += loss * loss;
        }
        let oracle = acc / n_oracle as f64;
        let oracle_var = acc2 / n_oracle as f64 - oracle * oracle;
        // Combined Monte Carlo error of the two independent estimates.
        let se = (oracle_var / n_oracle as f64).sqrt()
            + (oracle_var / 400_000.0).sqrt();
        assert!(
            (eval.dvf - oracle).abs() < 6.0 * se.max(1e-4),
            "dvf {} vs oracle {oracle}",
            eval.dvf
        );
        assert!(eval.dvf > 0.0);
    }

    /// Shifting every dose by 0.1 under curvature -2 costs exactly
    /// 2 * 0.1^2 = 0.02 per row.
    #[test]
    fn constant_dose_offset_costs_quadratic_loss() {
        let sc = Scenario {
            setting: Setting::Continuous,
            ..binary_scenario()
        };
        let spec = sc.model_spec();
        // True psi (flattened): (1, 1 | -2) -> dose (1 + x1)/4. An estimated
        // intercept of 1.4 shifts every dose by +0.1.
        let est = Rule::from_spec(&spec, vec![1.4, 1.0, -2.0]).unwrap();
        let eval = evaluate_rule(&est, &sc, 50_000, 3, None).unwrap();
        assert!(
            (eval.dvf - 0.02).abs() < 1e-9,
            "dvf {} should be 0.02",
            eval.dvf
        );
        assert_eq!(eval.concavity_violations, 0);
        assert_eq!(eval.clipped_doses, 0);
    }

    /// The true rule maximizes the value function, so dVF is nonnegative
    /// for arbitrary competing rules.
    #[test]
    fn dvf_is_nonnegative_for_perturbed_rules() {
        let sc = binary_scenario();
        let spec = sc.model_spec();
        let mut rng = crate::mcmc::substream_rng(77, 0);
        for _ in 0..10 {
            let psi = vec![
                2.5 + rng.gen_range(-2.0..2.0),
                -0.5 + rng.gen_range(-0.5..0.5),
            ];
            let rule = Rule::from_spec(&spec, psi).unwrap();
            let eval = evaluate_rule(&rule, &sc, 20_000, 4, None).unwrap();
            assert!(eval.dvf >= 0.0, "dvf {}", eval.dvf);
        }
    }

    #[test]
    fn doses_always_respect_bounds() {
        let rule = dose_rule(vec![1.0, 1.0, -0.01]);
        let rows: Vec<Vec<f64>> = (0..100).map(|i| vec![i as f64]).collect();
        let t = table(&["x1"], &rows);
        let p = rule.prepare(&t).unwrap();
        for row in 0..t.n_rows() {
            let d = p.decide_dose(&t, row, (0.0, 3.0)).unwrap();
            assert!((0.0..=3.0).contains(&d.dose));
        }
    }

    #[test]
    fn per_draw_doses_apply_the_rule_to_each_draw() {
        let sc = Scenario {
            setting: Setting::Continuous,
            ..binary_scenario()
        };
        let spec = sc.model_spec();
        let draws = vec![vec![1.0, 1.0, -2.0], vec![1.4, 1.0, -2.0]];
        let t = table(&["x1", "x2"], &[vec![3.0, 0.0]]);
        let doses = dose_per_draw(&spec, &draws, &t, 0, (-10.0, 10.0)).unwrap();
        assert_eq!(doses, vec![1.0, 1.1]);
    }
}
