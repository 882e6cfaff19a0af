//! Per-site estimation: OLS on the estimable design columns, detection of
//! inestimable coefficients, and emission of aggregate-only site summaries.
//!
//! A site with sparse data (a covariate level nobody carries, a constant
//! covariate) has a rank-deficient design. Columns are scanned in canonical
//! order and a column is dropped exactly when it lies in the span of the
//! columns retained before it, so the retained set is deterministic and
//! comparable across runs.

use crate::error::{Error, Result};
use crate::federation::{SiteSummary, SummaryEntry};
use crate::linalg::{Matrix, SequentialQr};
use crate::model::{DesignMatrix, ModelSpec};
use crate::sparsity::ReparamMap;

/// Default relative tolerance for declaring a design column dependent.
pub const RANK_TOLERANCE: f64 = 1e-8;

/// Retained/dropped split of the design columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Estimability {
    pub retained: Vec<usize>,
    pub dropped: Vec<usize>,
}

impl Estimability {
    pub fn is_full_rank(&self) -> bool {
        self.dropped.is_empty()
    }
}

/// Splits design columns into a maximal linearly independent retained set and
/// the dropped remainder.
///
/// Scanning in canonical order, a column is dropped iff it is numerically in
/// the span of the earlier retained columns (relative tolerance on the
/// residual norm); all-zero columns are always dropped.
pub fn detect_estimable(design: &Matrix, tolerance: f64) -> Result<Estimability> {
    if design.rows() == 0 {
        return Err(Error::EmptyDataset);
    }
    let qr = SequentialQr::decompose(design, tolerance);
    if qr.rank() == 0 {
        return Err(Error::DegenerateSite);
    }
    Ok(Estimability {
        retained: qr.retained().to_vec(),
        dropped: qr.dropped().to_vec(),
    })
}

/// One site's frequentist fit on its retained design columns.
#[derive(Debug, Clone)]
pub struct SiteFit {
    /// Design column indices the fit retained (canonical order).
    pub estimable_columns: Vec<usize>,
    /// OLS estimates for the retained columns, in retained order.
    pub coefficients: Vec<f64>,
    /// Unbiased residual variance `SSE / dof`.
    pub residual_variance: f64,
    /// Standard deviation of each coefficient estimate.
    pub coefficient_sds: Vec<f64>,
    pub n_obs: usize,
    pub dof: usize,
}

/// Ordinary least squares restricted to the retained columns.
///
/// Coefficients solve the normal equations; `sd(xi_k) = sqrt(s2 * [(X'X)^-1]_kk)`
/// with `s2 = SSE / dof`. A saturated fit (`dof = 0`) is an error because the
/// standard deviations are undefined.
pub fn fit_ols(design: &Matrix, estimable: &Estimability, outcome: &[f64]) -> Result<SiteFit> {
    let n = design.rows();
    assert_eq!(n, outcome.len(), "design/outcome row mismatch");
    let restricted = design.select_columns(&estimable.retained);
    let rank = restricted.cols();
    if n <= rank {
        return Err(Error::SaturatedFit);
    }
    let dof = n - rank;

    let qr = SequentialQr::decompose(&restricted, RANK_TOLERANCE * 1e-4);
    if qr.rank() != rank {
        // The retained set is full rank by construction; reaching this means
        // the caller passed a stale retained set for a different matrix.
        return Err(Error::DegenerateSite);
    }
    let coefficients = qr.solve(outcome);

    let fitted = restricted.mul_vec(&coefficients);
    let sse: f64 = outcome
        .iter()
        .zip(&fitted)
        .map(|(y, f)| (y - f) * (y - f))
        .sum();
    let residual_variance = sse / dof as f64;
    let coefficient_sds = qr
        .normal_inverse_diagonal()
        .into_iter()
        .map(|d| (residual_variance * d).max(0.0).sqrt())
        .collect();

    Ok(SiteFit {
        estimable_columns: estimable.retained.clone(),
        coefficients,
        residual_variance,
        coefficient_sds,
        n_obs: n,
        dof,
    })
}

/// Convenience: detection followed by the restricted OLS fit.
pub fn fit_site(design: &DesignMatrix, outcome: &[f64], tolerance: f64) -> Result<SiteFit> {
    let estimable = detect_estimable(&design.matrix, tolerance)?;
    fit_ols(&design.matrix, &estimable, outcome)
}

/// Builds the transferable summary for one site: blip-block estimates, their
/// standard deviations, and the reparametrization rows — nothing else leaves
/// the site. Treatment-free estimates are excluded by construction.
pub fn summarize_site(
    spec: &ModelSpec,
    site_id: &str,
    design: &DesignMatrix,
    fit: &SiteFit,
    mapping: &ReparamMap,
) -> Result<SiteSummary> {
    let fingerprint = crate::federation::model_fingerprint(spec)?;
    let mut entries = Vec::new();
    for row in &mapping.rows {
        let pos = fit
            .estimable_columns
            .iter()
            .position(|&c| c == row.column)
            .ok_or_else(|| Error::UnmappableSparsity {
                column: design.label(row.column).to_string(),
                reason: "reparametrization row refers to a column the fit did not retain".into(),
            })?;
        entries.push(SummaryEntry {
            label: design.label(row.column).to_string(),
            estimate: fit.coefficients[pos],
            sd: fit.coefficient_sds[pos],
            map_row: row.weights.clone(),
        });
    }
    entries.sort_by(|a, b| a.label.cmp(&b.label));
    Ok(SiteSummary {
        protocol_version: crate::federation::PROTOCOL_VERSION,
        site_id: site_id.to_string(),
        model_fingerprint: fingerprint,
        n_obs: fit.n_obs,
        dof: fit.dof,
        entries,
    })
}

/// Full site pipeline: design, estimability, OLS, sparsity map, summary.
pub fn run_site_pipeline(
    spec: &ModelSpec,
    data: &crate::model::SiteDataset,
) -> Result<SiteSummary> {
    let design = crate::model::build_design_matrix(spec, data)?;
    let estimable = detect_estimable(&design.matrix, RANK_TOLERANCE)?;
    let fit = fit_ols(&design.matrix, &estimable, &data.outcome)?;
    let scan = crate::sparsity::scan_sparsity(spec, data)?;
    let map = crate::sparsity::derive_reparam(spec, &design, &estimable, &scan)?;
    summarize_site(spec, &data.site_id, &design, &fit, &map)
}
