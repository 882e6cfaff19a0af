//! Site summary schema, canonical encoding, and validation.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::ModelSpec;

/// Version of the summary document and wire protocol.
pub const PROTOCOL_VERSION: u32 = 1;

/// One weight of a reparametrization row: `weight * psi[psi_index]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapWeight {
    pub psi_index: usize,
    pub weight: f64,
}

/// One transmitted blip coefficient: its label, estimate, standard deviation,
/// and the linear combination of global parameters it estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryEntry {
    pub label: String,
    pub estimate: f64,
    pub sd: f64,
    pub map_row: Vec<MapWeight>,
}

/// Everything a site transmits. By construction no field is derivable back to
/// individual-level data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub protocol_version: u32,
    pub site_id: String,
    /// Hash of the canonical model-specification serialization; summaries
    /// pooled together must agree on it.
    pub model_fingerprint: String,
    pub n_obs: usize,
    pub dof: usize,
    pub entries: Vec<SummaryEntry>,
}

impl SiteSummary {
    /// Number of scalar values the document transmits (estimates, standard
    /// deviations, and map weights). Used by the privacy audit: this count
    /// depends on the model, never on the number of observations.
    pub fn scalar_count(&self) -> usize {
        self.entries
            .iter()
            .map(|e| 2 + e.map_row.len())
            .sum::<usize>()
    }
}

/// SHA-256 over the canonical JSON serialization of a model specification,
/// as a lowercase hex string.
pub fn model_fingerprint(spec: &ModelSpec) -> Result<String> {
    spec.validate()?;
    let value = serde_json::to_value(spec)?;
    let bytes = serde_json::to_vec(&value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// Canonical byte encoding: UTF-8 JSON with sorted object keys, entries
/// sorted by label, map weights sorted by parameter index, and floats as
/// shortest round-trip decimals. Stable across runs and platforms.
pub fn encode_summary(summary: &SiteSummary) -> Result<Vec<u8>> {
    let mut canon = summary.clone();
    canon
        .entries
        .sort_by(|a, b| a.label.cmp(&b.label));
    for entry in &mut canon.entries {
        entry.map_row.sort_by_key(|w| w.psi_index);
    }
    // Going through `Value` sorts object keys (serde_json maps are ordered).
    let value = serde_json::to_value(&canon)?;
    Ok(serde_json::to_vec(&value)?)
}

/// Decodes without validation. Use [`validate_summary`] at trust boundaries.
pub fn decode_summary(bytes: &[u8]) -> Result<SiteSummary> {
    Ok(serde_json::from_slice(bytes)?)
}

/// Machine-readable rejection reason for an invalid summary document.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RejectionCode {
    VersionMismatch,
    ModelMismatch,
    DegenerateSd,
    MalformedMapRow,
    MalformedDocument,
    NonFiniteValue,
    DuplicateSite,
    Refused,
}

impl fmt::Display for RejectionCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            RejectionCode::VersionMismatch => "VERSION_MISMATCH",
            RejectionCode::ModelMismatch => "MODEL_MISMATCH",
            RejectionCode::DegenerateSd => "DEGENERATE_SD",
            RejectionCode::MalformedMapRow => "MALFORMED_MAP_ROW",
            RejectionCode::MalformedDocument => "MALFORMED_DOCUMENT",
            RejectionCode::NonFiniteValue => "NON_FINITE_VALUE",
            RejectionCode::DuplicateSite => "DUPLICATE_SITE",
            RejectionCode::Refused => "REFUSED",
        };
        f.write_str(s)
    }
}

/// A rejected document: the code travels on the wire, the message is for logs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rejection {
    pub code: RejectionCode,
    pub message: String,
}

impl Rejection {
    pub fn new(code: RejectionCode, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl fmt::Display for Rejection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl From<Rejection> for Error {
    fn from(r: Rejection) -> Error {
        Error::SummaryRejected(r)
    }
}

/// Validates a summary document: schema, protocol version, fingerprint,
/// positive finite standard deviations, and well-formed map rows.
pub fn validate_summary(
    bytes: &[u8],
    expected_fingerprint: Option<&str>,
) -> std::result::Result<SiteSummary, Rejection> {
    let summary: SiteSummary = serde_json::from_slice(bytes).map_err(|e| {
        Rejection::new(RejectionCode::MalformedDocument, format!("parse error: {e}"))
    })?;
    if summary.protocol_version != PROTOCOL_VERSION {
        return Err(Rejection::new(
            RejectionCode::VersionMismatch,
            format!(
                "document version {} but coordinator speaks {PROTOCOL_VERSION}",
                summary.protocol_version
            ),
        ));
    }
    if summary.site_id.is_empty() {
        return Err(Rejection::new(
            RejectionCode::MalformedDocument,
            "empty site id",
        ));
    }
    if let Some(expected) = expected_fingerprint {
        if summary.model_fingerprint != expected {
            return Err(Rejection::new(
                RejectionCode::ModelMismatch,
                format!(
                    "fingerprint {} does not match expected {expected}",
                    summary.model_fingerprint
                ),
            ));
        }
    }
    let mut labels = std::collections::BTreeSet::new();
    for entry in &summary.entries {
        if !labels.insert(&entry.label) {
            return Err(Rejection::new(
                RejectionCode::MalformedDocument,
                format!("duplicate entry label `{}`", entry.label),
            ));
        }
        if !entry.estimate.is_finite() {
            return Err(Rejection::new(
                RejectionCode::NonFiniteValue,
                format!("non-finite estimate for `{}`", entry.label),
            ));
        }
        if !(entry.sd.is_finite() && entry.sd > 0.0) {
            return Err(Rejection::new(
                RejectionCode::DegenerateSd,
                format!("entry `{}` has sd {}", entry.label, entry.sd),
            ));
        }
        if entry.map_row.is_empty() || entry.map_row.iter().all(|w| w.weight == 0.0) {
            return Err(Rejection::new(
                RejectionCode::MalformedMapRow,
                format!("entry `{}` has a zero map row", entry.label),
            ));
        }
        if entry.map_row.iter().any(|w| !w.weight.is_finite()) {
            return Err(Rejection::new(
                RejectionCode::NonFiniteValue,
                format!("non-finite map weight for `{}`", entry.label),
            ));
        }
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Term, TreatmentKind};

    fn sample_summary() -> SiteSummary {
        SiteSummary {
            protocol_version: PROTOCOL_VERSION,
            site_id: "site_1".into(),
            model_fingerprint: "f".repeat(64),
            n_obs: 123,
            dof: 119,
            entries: vec![
                SummaryEntry {
                    label: "a*intercept".into(),
                    estimate: 2.5,
                    sd: 0.25,
                    map_row: vec![MapWeight {
                        psi_index: 0,
                        weight: 1.0,
                    }],
                },
                SummaryEntry {
                    label: "a*x1".into(),
                    estimate: -0.5,
                    sd: 0.0625,
                    map_row: vec![MapWeight {
                        psi_index: 1,
                        weight: 1.0,
                    }],
                },
            ],
        }
    }

    #[test]
    fn encode_decode_round_trips_byte_for_byte() {
        let bytes = encode_summary(&sample_summary()).unwrap();
        let decoded = decode_summary(&bytes).unwrap();
        let re_encoded = encode_summary(&decoded).unwrap();
        assert_eq!(bytes, re_encoded);
    }

    #[test]
    fn entry_order_does_not_change_canonical_bytes() {
        let s1 = sample_summary();
        let mut s2 = s1.clone();
        s2.entries.reverse();
        assert_eq!(encode_summary(&s1).unwrap(), encode_summary(&s2).unwrap());
    }

    #[test]
    fn golden_document_decodes_to_known_summary() {
        let doc = br#"{
            "protocol_version": 1,
            "site_id": "site_9",
            "model_fingerprint": "abc123",
            "n_obs": 210,
            "dof": 202,
            "entries": [
                {"label": "a*intercept", "estimate": 1.5, "sd": 0.5,
                 "map_row": [{"psi_index": 0, "weight": 1.0},
                             {"psi_index": 1, "weight": 1.0},
                             {"psi_index": 3, "weight": 1.0}]},
                {"label": "a*x2:2", "estimate": -4.25, "sd": 0.75,
                 "map_row": [{"psi_index": 2, "weight": 1.0},
                             {"psi_index": 3, "weight": -1.0}]}
            ]
        }"#;
        let summary = validate_summary(doc, Some("abc123")).unwrap();
        assert_eq!(summary.site_id, "site_9");
        assert_eq!(summary.entries.len(), 2);
        assert_eq!(summary.entries[0].map_row.len(), 3);
        assert_eq!(summary.entries[1].map_row[1].weight, -1.0);
        assert_eq!(summary.scalar_count(), 2 + 3 + 2 + 2);
    }

    #[test]
    fn fingerprint_mismatch_is_rejected() {
        let bytes = encode_summary(&sample_summary()).unwrap();
        let err = validate_summary(&bytes, Some("other")).unwrap_err();
        assert_eq!(err.code, RejectionCode::ModelMismatch);
    }

    #[test]
    fn zero_sd_is_rejected() {
        let mut s = sample_summary();
        s.entries[0].sd = 0.0;
        let bytes = encode_summary(&s).unwrap();
        let err = validate_summary(&bytes, None).unwrap_err();
        assert_eq!(err.code, RejectionCode::DegenerateSd);
    }

    #[test]
    fn zero_map_row_is_rejected() {
        let mut s = sample_summary();
        s.entries[0].map_row = vec![MapWeight {
            psi_index: 0,
            weight: 0.0,
        }];
        let bytes = encode_summary(&s).unwrap();
        let err = validate_summary(&bytes, None).unwrap_err();
        assert_eq!(err.code, RejectionCode::MalformedMapRow);
    }

    #[test]
    fn version_skew_is_rejected() {
        let mut s = sample_summary();
        s.protocol_version = 99;
        let bytes = encode_summary(&s).unwrap();
        let err = validate_summary(&bytes, None).unwrap_err();
        assert_eq!(err.code, RejectionCode::VersionMismatch);
    }

    #[test]
    fn fingerprint_is_stable_and_spec_sensitive() {
        let spec1 = ModelSpec::new(
            TreatmentKind::Binary,
            vec![Term::Intercept, Term::Numeric("x1".into())],
            vec![Term::Intercept, Term::Numeric("x1".into())],
            vec![],
        )
        .unwrap();
        let spec2 = ModelSpec::new(
            TreatmentKind::Binary,
            vec![Term::Intercept, Term::Numeric("x1".into())],
            vec![Term::Intercept],
            vec![],
        )
        .unwrap();
        let f1a = model_fingerprint(&spec1).unwrap();
        let f1b = model_fingerprint(&spec1).unwrap();
        let f2 = model_fingerprint(&spec2).unwrap();
        assert_eq!(f1a, f1b);
        assert_ne!(f1a, f2);
        assert_eq!(f1a.len(), 64);
    }
}
