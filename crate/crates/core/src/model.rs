//! Domain types shared by all modules: model specifications, site datasets,
//! coefficient indexing, and design-matrix construction.
//!
//! The outcome model is the sum of a treatment-free part and a blip part,
//!
//! ```text
//! E(Y | X = x, A = a) = beta' x_tf  +  a * psi1' x_blip  [+ a^2 * psi2' x_quad]
//! ```
//!
//! where the quadratic block exists only for a continuous treatment. The
//! design matrix lays columns out canonically: treatment-free terms first,
//! then the `a`-interacted blip terms, then the `a^2`-interacted terms, so
//! that serialized coefficient summaries are comparable across sites.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// One model term: an intercept, a numeric covariate, or a single indicator
/// column of a pre-expanded categorical covariate.
///
/// Indicators render as `var:level` (the dataset column must carry the same
/// name); numeric terms render as the bare column name.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Term {
    Intercept,
    Numeric(String),
    Indicator { var: String, level: String },
}

impl Term {
    pub fn parse(s: &str) -> Result<Term> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::InvalidModelSpec("empty term name".into()));
        }
        if s == "intercept" || s == "1" {
            return Ok(Term::Intercept);
        }
        match s.split_once(':') {
            Some((var, level)) if !var.is_empty() && !level.is_empty() => Ok(Term::Indicator {
                var: var.to_string(),
                level: level.to_string(),
            }),
            Some(_) => Err(Error::InvalidModelSpec(format!("malformed term `{s}`"))),
            None => Ok(Term::Numeric(s.to_string())),
        }
    }

    /// Dataset column name (the intercept has no column).
    pub fn column_name(&self) -> Option<String> {
        match self {
            Term::Intercept => None,
            Term::Numeric(name) => Some(name.clone()),
            Term::Indicator { var, level } => Some(format!("{var}:{level}")),
        }
    }

    pub fn is_intercept(&self) -> bool {
        matches!(self, Term::Intercept)
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Intercept => write!(f, "intercept"),
            Term::Numeric(name) => write!(f, "{name}"),
            Term::Indicator { var, level } => write!(f, "{var}:{level}"),
        }
    }
}

impl Serialize for Term {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Term {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Term, D::Error> {
        let raw = String::deserialize(d)?;
        Term::parse(&raw).map_err(serde::de::Error::custom)
    }
}

/// Treatment type of the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TreatmentKind {
    Binary,
    /// Continuous dose with a blip quadratic in the dose.
    ContinuousQuadratic,
}

/// Which coefficient block a design column (or parameter) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CoefKind {
    TreatmentFree,
    BlipLinear,
    BlipQuadratic,
}

/// Stable address of a coefficient within a [`ModelSpec`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CoefficientIndex {
    pub kind: CoefKind,
    pub position: usize,
}

/// Names the predictive and prescriptive covariate terms and the treatment
/// type, and maps every blip coefficient to a stable flattened index
/// (linear block first, then the quadratic block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub treatment_kind: TreatmentKind,
    pub treatment_free_terms: Vec<Term>,
    pub blip_terms_linear: Vec<Term>,
    #[serde(default)]
    pub blip_terms_quadratic: Vec<Term>,
}

impl ModelSpec {
    pub fn new(
        treatment_kind: TreatmentKind,
        treatment_free_terms: Vec<Term>,
        blip_terms_linear: Vec<Term>,
        blip_terms_quadratic: Vec<Term>,
    ) -> Result<ModelSpec> {
        let spec = ModelSpec {
            treatment_kind,
            treatment_free_terms,
            blip_terms_linear,
            blip_terms_quadratic,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blip_terms_linear.first() != Some(&Term::Intercept) {
            return Err(Error::InvalidModelSpec(
                "the first blip term must be the intercept (main treatment effect)".into(),
            ));
        }
        if self.treatment_free_terms.is_empty() {
            return Err(Error::InvalidModelSpec(
                "treatment-free term list is empty".into(),
            ));
        }
        match self.treatment_kind {
            TreatmentKind::Binary => {
                if !self.blip_terms_quadratic.is_empty() {
                    return Err(Error::InvalidModelSpec(
                        "binary treatment admits no quadratic blip block".into(),
                    ));
                }
            }
            TreatmentKind::ContinuousQuadratic => {
                if self.blip_terms_quadratic.first() != Some(&Term::Intercept) {
                    return Err(Error::InvalidModelSpec(
                        "quadratic blip block must start with the intercept".into(),
                    ));
                }
            }
        }
        for (name, list) in [
            ("treatment_free_terms", &self.treatment_free_terms),
            ("blip_terms_linear", &self.blip_terms_linear),
            ("blip_terms_quadratic", &self.blip_terms_quadratic),
        ] {
            let uniq: BTreeSet<&Term> = list.iter().collect();
            if uniq.len() != list.len() {
                return Err(Error::InvalidModelSpec(format!(
                    "duplicate term in {name}"
                )));
            }
        }
        let tf: BTreeSet<&Term> = self.treatment_free_terms.iter().collect();
        for term in self
            .blip_terms_linear
            .iter()
            .chain(self.blip_terms_quadratic.iter())
        {
            if !tf.contains(term) {
                return Err(Error::InvalidModelSpec(format!(
                    "blip term `{term}` does not appear among the treatment-free terms"
                )));
            }
        }
        Ok(())
    }

    /// Number of treatment-free coefficients.
    pub fn n_treatment_free(&self) -> usize {
        self.treatment_free_terms.len()
    }

    /// Number of blip coefficients across both blocks.
    pub fn n_blip(&self) -> usize {
        self.blip_terms_linear.len() + self.blip_terms_quadratic.len()
    }

    /// Flattened blip parameter index of a blip coefficient.
    pub fn psi_index(&self, index: CoefficientIndex) -> Option<usize> {
        match index.kind {
            CoefKind::BlipLinear if index.position < self.blip_terms_linear.len() => {
                Some(index.position)
            }
            CoefKind::BlipQuadratic if index.position < self.blip_terms_quadratic.len() => {
                Some(self.blip_terms_linear.len() + index.position)
            }
            _ => None,
        }
    }

    /// Inverse of [`ModelSpec::psi_index`].
    pub fn psi_coefficient(&self, psi: usize) -> Option<CoefficientIndex> {
        let q1 = self.blip_terms_linear.len();
        if psi < q1 {
            Some(CoefficientIndex {
                kind: CoefKind::BlipLinear,
                position: psi,
            })
        } else if psi < self.n_blip() {
            Some(CoefficientIndex {
                kind: CoefKind::BlipQuadratic,
                position: psi - q1,
            })
        } else {
            None
        }
    }

    /// Label of a flattened blip index, matching the design column labels:
    /// `a*x1` for the linear block, `a2*x1` for the quadratic block.
    pub fn psi_label(&self, psi: usize) -> String {
        let q1 = self.blip_terms_linear.len();
        if psi < q1 {
            format!("a*{}", self.blip_terms_linear[psi])
        } else {
            format!("a2*{}", self.blip_terms_quadratic[psi - q1])
        }
    }

    pub fn psi_labels(&self) -> Vec<String> {
        (0..self.n_blip()).map(|t| self.psi_label(t)).collect()
    }

    /// Flattened indices of the blip intercepts (main treatment effects),
    /// which are reported but never subject to interaction selection.
    pub fn psi_intercept_indices(&self) -> Vec<usize> {
        let mut out = vec![0];
        if !self.blip_terms_quadratic.is_empty() {
            out.push(self.blip_terms_linear.len());
        }
        out
    }

    /// Blip term for a flattened index.
    pub fn psi_term(&self, psi: usize) -> &Term {
        let q1 = self.blip_terms_linear.len();
        if psi < q1 {
            &self.blip_terms_linear[psi]
        } else {
            &self.blip_terms_quadratic[psi - q1]
        }
    }

    pub fn from_toml_str(text: &str) -> Result<ModelSpec> {
        let spec: ModelSpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_json_str(text: &str) -> Result<ModelSpec> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec from a `.toml` or `.json` file (by extension; TOML wins
    /// when the extension is unknown).
    pub fn from_path(path: &Path) -> Result<ModelSpec> {
        let text = std::fs::read_to_string(path)?;
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            ModelSpec::from_json_str(&text)
        } else {
            ModelSpec::from_toml_str(&text)
        }
    }
}

/// One site's raw data: covariate columns, a treatment vector, and an
/// outcome vector. Categorical covariates must arrive pre-expanded into
/// indicator columns; the toolkit does no factor encoding.
#[derive(Debug, Clone)]
pub struct SiteDataset {
    pub site_id: String,
    column_names: Vec<String>,
    /// Column-major covariate values, one `Vec` per column.
    columns: Vec<Vec<f64>>,
    pub treatment: Vec<f64>,
    pub outcome: Vec<f64>,
}

impl SiteDataset {
    pub fn new(
        site_id: impl Into<String>,
        named_columns: Vec<(String, Vec<f64>)>,
        treatment: Vec<f64>,
        outcome: Vec<f64>,
    ) -> Result<SiteDataset> {
        let n = outcome.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if treatment.len() != n {
            return Err(Error::InvalidModelSpec(
                "treatment and outcome lengths differ".into(),
            ));
        }
        let mut column_names = Vec::with_capacity(named_columns.len());
        let mut columns = Vec::with_capacity(named_columns.len());
        for (name, values) in named_columns {
            if values.len() != n {
                return Err(Error::InvalidModelSpec(format!(
                    "column `{name}` length differs from outcome length"
                )));
            }
            column_names.push(name);
            columns.push(values);
        }
        let ds = SiteDataset {
            site_id: site_id.into(),
            column_names,
            columns,
            treatment,
            outcome,
        };
        ds.check_finite()?;
        Ok(ds)
    }

    fn check_finite(&self) -> Result<()> {
        for (name, col) in self.column_names.iter().zip(&self.columns) {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    column: name.clone(),
                    row,
                });
            }
        }
        for (name, col) in [("treatment", &self.treatment), ("outcome", &self.outcome)] {
            if let Some(row) = col.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    column: name.to_string(),
                    row,
                });
            }
        }
        Ok(())
    }

    pub fn n_obs(&self) -> usize {
        self.outcome.len()
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.column_names
            .iter()
            .position(|c| c == name)
            .map(|i| self.columns[i].as_slice())
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    /// Value of a model term at a row (intercept is 1).
    pub fn term_value(&self, term: &Term, row: usize) -> Result<f64> {
        match term.column_name() {
            None => Ok(1.0),
            Some(name) => self
                .column(&name)
                .map(|col| col[row])
                .ok_or(Error::MissingColumn(name)),
        }
    }

    /// Reads a dataset from CSV with a header row. The treatment and outcome
    /// columns are identified by name; every other column becomes a covariate.
    pub fn from_csv_reader<R: Read>(
        site_id: impl Into<String>,
        reader: R,
        treatment_col: &str,
        outcome_col: &str,
    ) -> Result<SiteDataset> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers: Vec<String> = rdr.headers()?.iter().map(|h| h.to_string()).collect();
        let treat_idx = headers
            .iter()
            .position(|h| h == treatment_col)
            .ok_or_else(|| Error::MissingColumn(treatment_col.to_string()))?;
        let outcome_idx = headers
            .iter()
            .position(|h| h == outcome_col)
            .ok_or_else(|| Error::MissingColumn(outcome_col.to_string()))?;

        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
        for (row_idx, record) in rdr.records().enumerate() {
            let record = record?;
            for (j, field) in record.iter().enumerate() {
                let value: f64 = field.trim().parse().map_err(|_| Error::NonFinite {
                    column: headers[j].clone(),
                    row: row_idx,
                })?;
                columns[j].push(value);
            }
        }

        let treatment = columns[treat_idx].clone();
        let outcome = columns[outcome_idx].clone();
        let named: Vec<(String, Vec<f64>)> = headers
            .into_iter()
            .zip(columns)
            .enumerate()
            .filter(|(i, _)| *i != treat_idx && *i != outcome_idx)
            .map(|(_, pair)| pair)
            .collect();
        SiteDataset::new(site_id, named, treatment, outcome)
    }

    pub fn from_csv_path(
        path: &Path,
        site_id: impl Into<String>,
        treatment_col: &str,
        outcome_col: &str,
    ) -> Result<SiteDataset> {
        let file = std::fs::File::open(path)?;
        SiteDataset::from_csv_reader(site_id, file, treatment_col, outcome_col)
    }

    /// Writes the dataset as CSV (covariates, then treatment, then outcome).
    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = self.column_names.clone();
        header.push("treatment".into());
        header.push("outcome".into());
        wtr.write_record(&header)?;
        for row in 0..self.n_obs() {
            let mut record: Vec<String> =
                self.columns.iter().map(|c| fmt_float(c[row])).collect();
            record.push(fmt_float(self.treatment[row]));
            record.push(fmt_float(self.outcome[row]));
            wtr.write_record(&record)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Shortest round-trip decimal for CSV output.
pub(crate) fn fmt_float(v: f64) -> String {
    format!("{v}")
}

/// A design column: its values are implicit in the matrix; this carries the
/// coefficient address and a stable label such as `x1`, `a*x1`, or `a2*x1`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DesignColumn {
    pub index: CoefficientIndex,
    pub label: String,
}

/// Design matrix in canonical column order together with the bijective map
/// from columns to coefficient addresses.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    pub matrix: Matrix,
    pub columns: Vec<DesignColumn>,
}

impl DesignMatrix {
    pub fn n_obs(&self) -> usize {
        self.matrix.rows()
    }

    pub fn n_cols(&self) -> usize {
        self.matrix.cols()
    }

    pub fn label(&self, col: usize) -> &str {
        &self.columns[col].label
    }

    /// Positions of all blip-block columns (linear and quadratic).
    pub fn blip_columns(&self) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.index.kind != CoefKind::TreatmentFree)
            .map(|(i, _)| i)
            .collect()
    }
}

fn blip_column_label(prefix: &str, term: &Term) -> String {
    format!("{prefix}*{term}")
}

/// Expands a dataset against a model specification into the canonical design
/// matrix `[treatment-free | a * blip-linear | a^2 * blip-quadratic]`.
///
/// Fails when a term's column is missing, any value is non-finite, or an
/// indicator column contains values outside `{0, 1}`.
pub fn build_design_matrix(spec: &ModelSpec, data: &SiteDataset) -> Result<DesignMatrix> {
    spec.validate()?;
    let n = data.n_obs();

    // Resolve columns up front so a missing covariate fails before any math.
    let mut term_cols: Vec<(CoefficientIndex, &Term, Option<&[f64]>)> = Vec::new();
    for (pos, term) in spec.treatment_free_terms.iter().enumerate() {
        let idx = CoefficientIndex {
            kind: CoefKind::TreatmentFree,
            position: pos,
        };
        term_cols.push((idx, term, resolve_term(data, term)?));
    }
    for (pos, term) in spec.blip_terms_linear.iter().enumerate() {
        let idx = CoefficientIndex {
            kind: CoefKind::BlipLinear,
            position: pos,
        };
        term_cols.push((idx, term, resolve_term(data, term)?));
    }
    for (pos, term) in spec.blip_terms_quadratic.iter().enumerate() {
        let idx = CoefficientIndex {
            kind: CoefKind::BlipQuadratic,
            position: pos,
        };
        term_cols.push((idx, term, resolve_term(data, term)?));
    }

    let mut matrix = Matrix::zeros(n, term_cols.len());
    let mut columns = Vec::with_capacity(term_cols.len());
    for (j, (idx, term, col)) in term_cols.iter().enumerate() {
        if let (Term::Indicator { .. }, Some(values)) = (term, col) {
            for (row, &v) in values.iter().enumerate() {
                if v != 0.0 && v != 1.0 {
                    return Err(Error::NonBinaryIndicator {
                        column: term.to_string(),
                        value: v,
                        row,
                    });
                }
            }
        }
        let label = match idx.kind {
            CoefKind::TreatmentFree => term.to_string(),
            CoefKind::BlipLinear => blip_column_label("a", term),
            CoefKind::BlipQuadratic => blip_column_label("a2", term),
        };
        for row in 0..n {
            let base = col.map_or(1.0, |c| c[row]);
            let a = data.treatment[row];
            let v = match idx.kind {
                CoefKind::TreatmentFree => base,
                CoefKind::BlipLinear => a * base,
                CoefKind::BlipQuadratic => a * a * base,
            };
            matrix.set(row, j, v);
        }
        columns.push(DesignColumn { index: *idx, label });
    }

    Ok(DesignMatrix { matrix, columns })
}

fn resolve_term<'d>(data: &'d SiteDataset, term: &Term) -> Result<Option<&'d [f64]>> {
    match term.column_name() {
        None => Ok(None),
        Some(name) => data
            .column(&name)
            .map(Some)
            .ok_or(Error::MissingColumn(name)),
    }
}
