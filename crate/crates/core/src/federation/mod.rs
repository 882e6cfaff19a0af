//! The site/coordinator exchange layer.
//!
//! Sites transmit aggregate summaries only: blip coefficient estimates, their
//! standard deviations, and the reparametrization rows linking them to global
//! parameters. No raw rows, residuals, or treatment-free estimates ever leave
//! a site, and the payload size is independent of the site's sample size.
//!
//! Two transports produce byte-identical inputs to the pooling step: a file
//! exchange (`*.summary.json` documents in a directory) and a streaming TCP
//! mode with length-prefixed JSON frames.

mod schema;
mod wire;

pub use schema::{
    decode_summary, encode_summary, model_fingerprint, validate_summary, MapWeight, Rejection,
    RejectionCode, SiteSummary, SummaryEntry, PROTOCOL_VERSION,
};
pub use wire::{
    collect, read_summaries_dir, serve_summary, write_summaries_dir, CollectOptions,
    CollectOutcome, DEFAULT_TIMEOUT_SECS, TIMEOUT_ENV_VAR,
};
