//! Reparametrization maps for sites with sparse data.
//!
//! When a site's design is rank deficient, the coefficients it *can* estimate
//! are linear combinations of the global blip parameters rather than the
//! parameters themselves. Two sparsity patterns are explainable:
//!
//! - a covariate constant at value `c` in the site: the dropped blip term's
//!   parameter folds into the blip intercept with weight `c`;
//! - a categorical covariate whose reference level is absent: the dropped
//!   indicator's level becomes the implicit reference, adding its parameter
//!   to the intercept and subtracting it from the retained same-variable
//!   indicator rows.
//!
//! Every retained blip coefficient gets one map row over global parameter
//! indices; the stage-two likelihood places each estimate on the row's
//! linear combination. Any other dependence pattern (for example sparsity in
//! the treatment itself) is refused as unmappable rather than guessed at.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::federation::MapWeight;
use crate::model::{CoefKind, DesignMatrix, ModelSpec, SiteDataset, Term};
use crate::stage_one::Estimability;

/// Per-site data facts that explain dropped columns: which covariate terms
/// are constant (and at what value) and which categorical variables have no
/// observations at their reference level.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparsityScan {
    /// Covariate terms constant across the site's rows, with the constant.
    pub constant_terms: BTreeMap<Term, f64>,
    /// Categorical variables whose listed indicator columns sum to one on
    /// every row (no observations at the reference level).
    pub reference_absent: BTreeSet<String>,
}

/// Scans a dataset for the column facts needed to explain dropped columns.
pub fn scan_sparsity(spec: &ModelSpec, data: &SiteDataset) -> Result<SparsityScan> {
    let mut scan = SparsityScan::default();
    let mut groups: BTreeMap<String, Vec<&Term>> = BTreeMap::new();

    let mut seen = BTreeSet::new();
    for term in spec
        .treatment_free_terms
        .iter()
        .chain(&spec.blip_terms_linear)
        .chain(&spec.blip_terms_quadratic)
    {
        if term.is_intercept() || !seen.insert(term.clone()) {
            continue;
        }
        let name = term.column_name().expect("non-intercept terms have columns");
        let col = data.column(&name).ok_or(Error::MissingColumn(name))?;
        let first = col[0];
        if col.iter().all(|&v| v == first) {
            scan.constant_terms.insert(term.clone(), first);
        }
        if let Term::Indicator { var, .. } = term {
            groups.entry(var.clone()).or_default().push(term);
        }
    }

    for (var, terms) in groups {
        let cols: Vec<&[f64]> = terms
            .iter()
            .map(|t| data.column(&t.column_name().unwrap()).unwrap())
            .collect();
        let n = data.n_obs();
        let all_rows_covered =
            (0..n).all(|row| (cols.iter().map(|c| c[row]).sum::<f64>() - 1.0).abs() == 0.0);
        if all_rows_covered {
            scan.reference_absent.insert(var);
        }
    }

    Ok(scan)
}

/// One retained blip coefficient's linear combination of global parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamRow {
    /// Design column index of the retained blip coefficient.
    pub column: usize,
    /// The coefficient's own flattened blip parameter index.
    pub psi: usize,
    /// Sparse weight vector over global blip parameter indices, ascending.
    pub weights: Vec<MapWeight>,
}

/// The per-site linear map from estimable blip coefficients to global blip
/// parameters, plus the data facts it was derived from.
#[derive(Debug, Clone, PartialEq)]
pub struct ReparamMap {
    pub rows: Vec<ReparamRow>,
    pub context: SparsityScan,
}

impl ReparamMap {
    /// True when every retained blip coefficient maps to exactly its own
    /// parameter with weight one.
    pub fn is_identity(&self) -> bool {
        self.rows.iter().all(|row| {
            row.weights.len() == 1
                && row.weights[0].psi_index == row.psi
                && row.weights[0].weight == 1.0
        })
    }

    /// Flattened parameter indices referenced by any row.
    pub fn referenced_indices(&self) -> BTreeSet<usize> {
        self.rows
            .iter()
            .flat_map(|r| r.weights.iter().map(|w| w.psi_index))
            .collect()
    }
}

/// Derives expectation-algebra rows for one coefficient block: each retained
/// column starts as the identity on its own parameter; dropped columns fold
/// into the block intercept (constants) or shift the reference (absent
/// categorical reference levels).
fn derive_block_rows(
    design: &DesignMatrix,
    retained: &BTreeSet<usize>,
    scan: &SparsityScan,
    block: &[(usize, &Term, usize)],
    intercept_must_hold: &str,
) -> Result<BTreeMap<usize, BTreeMap<usize, f64>>> {
    let mut rows: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();
    if block.is_empty() {
        return Ok(rows);
    }

    let intercept_col = block[0].0;
    if !retained.contains(&intercept_col) {
        return Err(Error::UnmappableSparsity {
            column: design.label(intercept_col).to_string(),
            reason: intercept_must_hold.to_string(),
        });
    }

    for &(col, _, param) in block {
        if retained.contains(&col) {
            rows.entry(col).or_default().insert(param, 1.0);
        }
    }

    for &(col, term, param) in block {
        if retained.contains(&col) {
            continue;
        }
        if let Some(&c) = scan.constant_terms.get(term) {
            if c != 0.0 {
                *rows
                    .get_mut(&intercept_col)
                    .expect("intercept row exists")
                    .entry(param)
                    .or_insert(0.0) += c;
            }
        } else if let Term::Indicator { var, .. } = term {
            if !scan.reference_absent.contains(var) {
                return Err(Error::UnmappableSparsity {
                    column: design.label(col).to_string(),
                    reason: "indicator column is linearly dependent but its reference \
                             level is observed"
                        .into(),
                });
            }
            // The dropped level becomes the implicit reference: its
            // parameter joins the intercept and offsets every retained
            // same-variable indicator in this block.
            *rows
                .get_mut(&intercept_col)
                .unwrap()
                .entry(param)
                .or_insert(0.0) += 1.0;
            for &(other_col, other_term, _) in block {
                if other_col == col || !retained.contains(&other_col) {
                    continue;
                }
                if let Term::Indicator { var: other_var, .. } = other_term {
                    if other_var == var {
                        *rows
                            .get_mut(&other_col)
                            .unwrap()
                            .entry(param)
                            .or_insert(0.0) -= 1.0;
                    }
                }
            }
        } else {
            return Err(Error::UnmappableSparsity {
                column: design.label(col).to_string(),
                reason: "column is linearly dependent but neither constant nor an \
                         absent-reference indicator"
                    .into(),
            });
        }
    }

    Ok(rows)
}

fn rows_to_vec(
    design: &DesignMatrix,
    rows: BTreeMap<usize, BTreeMap<usize, f64>>,
    param_of: impl Fn(usize) -> usize,
) -> Result<Vec<ReparamRow>> {
    let mut out = Vec::with_capacity(rows.len());
    for (col, weights) in rows {
        let weights: Vec<MapWeight> = weights
            .into_iter()
            .filter(|(_, w)| *w != 0.0)
            .map(|(psi_index, weight)| MapWeight { psi_index, weight })
            .collect();
        if weights.is_empty() {
            return Err(Error::UnmappableSparsity {
                column: design.label(col).to_string(),
                reason: "derived map row is identically zero".into(),
            });
        }
        out.push(ReparamRow {
            column: col,
            psi: param_of(col),
            weights,
        });
    }
    Ok(out)
}

/// Derives the reparametrization map for one site's blip coefficients from
/// its dropped-column set and the sparsity scan.
///
/// Fails with [`Error::UnmappableSparsity`] when a dropped blip column has
/// neither a recorded constant nor an absent-reference explanation, or when
/// a blip intercept itself is inestimable (sparsity in the treatment).
pub fn derive_reparam(
    spec: &ModelSpec,
    design: &DesignMatrix,
    estimable: &Estimability,
    scan: &SparsityScan,
) -> Result<ReparamMap> {
    let retained: BTreeSet<usize> = estimable.retained.iter().copied().collect();
    let mut all_rows: BTreeMap<usize, BTreeMap<usize, f64>> = BTreeMap::new();

    for kind in [CoefKind::BlipLinear, CoefKind::BlipQuadratic] {
        let block: Vec<(usize, &Term, usize)> = design
            .columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.index.kind == kind)
            .map(|(col, c)| {
                let psi = spec.psi_index(c.index).expect("blip column");
                (col, spec.psi_term(psi), psi)
            })
            .collect();
        let rows = derive_block_rows(
            design,
            &retained,
            scan,
            &block,
            "the blip intercept is inestimable; the site lacks variation in the \
             treatment itself",
        )?;
        all_rows.extend(rows);
    }

    let rows = rows_to_vec(design, all_rows, |col| {
        spec.psi_index(design.columns[col].index)
            .expect("map rows cover blip columns only")
    })?;

    Ok(ReparamMap {
        rows,
        context: scan.clone(),
    })
}

/// The analogous map for the treatment-free block, used by the one-stage
/// model: rows link retained treatment-free coefficients to the global
/// treatment-free parameters (indexed by term position).
pub fn derive_treatment_free_map(
    spec: &ModelSpec,
    design: &DesignMatrix,
    estimable: &Estimability,
    scan: &SparsityScan,
) -> Result<Vec<ReparamRow>> {
    let retained: BTreeSet<usize> = estimable.retained.iter().copied().collect();
    let block: Vec<(usize, &Term, usize)> = design
        .columns
        .iter()
        .enumerate()
        .filter(|(_, c)| c.index.kind == CoefKind::TreatmentFree)
        .map(|(col, c)| {
            (
                col,
                &spec.treatment_free_terms[c.index.position],
                c.index.position,
            )
        })
        .collect();
    let rows = derive_block_rows(
        design,
        &retained,
        scan,
        &block,
        "the treatment-free intercept is inestimable",
    )?;
    rows_to_vec(design, rows, |col| design.columns[col].index.position)
}

/// Flags the global blip parameter indices that appear in no map row of any
/// site. Flagged indices carry no likelihood; their posteriors equal their
/// priors, and downstream consumers should treat them as inestimable.
pub fn validate_identifiability(n_blip: usize, maps: &[&ReparamMap]) -> Vec<usize> {
    let mut covered = vec![false; n_blip];
    for map in maps {
        for idx in map.referenced_indices() {
            if idx < n_blip {
                covered[idx] = true;
            }
        }
    }
    covered
        .iter()
        .enumerate()
        .filter(|(_, c)| !**c)
        .map(|(i, _)| i)
        .collect()
}
