//! Error types shared across the toolkit.

use thiserror::Error;

/// Unified error type for model construction, estimation, pooling, and IO.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model specification: {0}")]
    InvalidModelSpec(String),

    #[error("covariate column `{0}` not found in dataset")]
    MissingColumn(String),

    #[error("non-finite value in column `{column}` at row {row}")]
    NonFinite { column: String, row: usize },

    #[error("indicator column `{column}` contains non-binary value {value} at row {row}")]
    NonBinaryIndicator {
        column: String,
        value: f64,
        row: usize,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("degenerate site: every design column was dropped")]
    DegenerateSite,

    #[error("saturated fit: zero residual degrees of freedom, standard deviations undefined")]
    SaturatedFit,

    #[error("unmappable sparsity pattern in column `{column}`: {reason}")]
    UnmappableSparsity { column: String, reason: String },

    #[error("duplicate site id `{0}`")]
    DuplicateSite(String),

    #[error("degenerate standard deviation for `{label}` in site `{site_id}`: a saturated stage-one fit cannot enter the likelihood")]
    DegenerateSd { site_id: String, label: String },

    #[error("map row for `{label}` in site `{site_id}` references parameter index {index}, but the model has {len} blip parameters")]
    PsiIndexOutOfRange {
        site_id: String,
        label: String,
        index: usize,
        len: usize,
    },

    #[error("invalid prior configuration: {0}")]
    InvalidPrior(String),

    #[error("full-conditional precision is not positive definite for {context}; this indicates a reparametrization map bug")]
    NonPositiveDefinite { context: String },

    #[error("invalid scenario configuration: {0}")]
    InvalidScenario(String),

    #[error("undefined rule: both blip blocks are zero at the evaluation point")]
    UndefinedRule,

    #[error("rule/model mismatch: {0}")]
    RuleMismatch(String),

    #[error("site summary rejected: {0}")]
    SummaryRejected(crate::federation::Rejection),

    #[error("federation protocol error: {0}")]
    Protocol(String),

    #[error("collection incomplete: received {received} of {expected} site summaries")]
    CollectionIncomplete { received: usize, expected: usize },

    #[error("study aborted: {failed} of {total} replicates failed (limit {limit_percent}%)")]
    StudyFailureRate {
        failed: usize,
        total: usize,
        limit_percent: u8,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("TOML error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
