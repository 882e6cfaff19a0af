//! File and TCP exchange of site summaries.
//!
//! Wire format: every message is a frame of 4 big-endian length bytes
//! followed by that many bytes of UTF-8 JSON. A session is
//!
//! ```text
//! site -> HELLO {protocol_version, fingerprint}
//! coordinator -> ACK            (or NACK + close: session refused)
//! site -> canonical summary document
//! coordinator -> ACK | NACK {code, message}
//! ```
//!
//! The coordinator accepts connections concurrently but registers summaries
//! behind a single collection lock, accepting exactly one summary per site
//! id. It stops at the expected site count or at the deadline; a partial
//! collection is an error unless explicitly allowed.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::schema::{
    encode_summary, validate_summary, Rejection, RejectionCode, SiteSummary, PROTOCOL_VERSION,
};
use crate::error::{Error, Result};

/// Environment variable overriding the per-collection timeout in seconds.
pub const TIMEOUT_ENV_VAR: &str = "BLIPMETA_TIMEOUT_SECS";

/// Default collection timeout.
pub const DEFAULT_TIMEOUT_SECS: u64 = 30;

/// Upper bound on frame payloads; summaries are tiny, so anything larger is a
/// protocol violation.
const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ControlMessage {
    Hello {
        protocol_version: u32,
        fingerprint: String,
    },
    Ack,
    Nack(Rejection),
}

fn write_frame<W: Write>(writer: &mut W, payload: &[u8]) -> Result<()> {
    let len = u32::try_from(payload.len())
        .map_err(|_| Error::Protocol("frame too large".into()))?;
    writer.write_all(&len.to_be_bytes())?;
    writer.write_all(payload)?;
    writer.flush()?;
    Ok(())
}

fn read_frame<R: Read>(reader: &mut R) -> Result<Vec<u8>> {
    let mut len_buf = [0u8; 4];
    reader.read_exact(&mut len_buf)?;
    let len = u32::from_be_bytes(len_buf) as usize;
    if len > MAX_FRAME_LEN {
        return Err(Error::Protocol(format!("frame of {len} bytes exceeds limit")));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload)?;
    Ok(payload)
}

fn write_control<W: Write>(writer: &mut W, msg: &ControlMessage) -> Result<()> {
    write_frame(writer, &serde_json::to_vec(msg)?)
}

fn read_control<R: Read>(reader: &mut R) -> Result<ControlMessage> {
    let payload = read_frame(reader)?;
    Ok(serde_json::from_slice(&payload)?)
}

/// Site-side client: sends one summary to the coordinator and returns once
/// it is acknowledged.
pub fn serve_summary<A: ToSocketAddrs>(addr: A, summary: &SiteSummary) -> Result<()> {
    let mut stream = TcpStream::connect(addr)?;
    stream.set_nodelay(true).ok();
    write_control(
        &mut stream,
        &ControlMessage::Hello {
            protocol_version: PROTOCOL_VERSION,
            fingerprint: summary.model_fingerprint.clone(),
        },
    )?;
    match read_control(&mut stream)? {
        ControlMessage::Ack => {}
        ControlMessage::Nack(rej) => return Err(rej.into()),
        ControlMessage::Hello { .. } => {
            return Err(Error::Protocol("unexpected HELLO from coordinator".into()))
        }
    }
    write_frame(&mut stream, &encode_summary(summary)?)?;
    match read_control(&mut stream)? {
        ControlMessage::Ack => Ok(()),
        ControlMessage::Nack(rej) => Err(rej.into()),
        ControlMessage::Hello { .. } => {
            Err(Error::Protocol("unexpected HELLO from coordinator".into()))
        }
    }
}

/// Coordinator-side collection parameters.
#[derive(Debug, Clone)]
pub struct CollectOptions {
    /// Number of distinct sites expected.
    pub expect: usize,
    /// Model fingerprint every summary must carry.
    pub fingerprint: String,
    /// Overall deadline; `None` reads `BLIPMETA_TIMEOUT_SECS` or the default.
    pub timeout: Option<Duration>,
    /// Proceed with however many summaries arrived by the deadline.
    pub allow_partial: bool,
}

impl CollectOptions {
    pub fn new(expect: usize, fingerprint: impl Into<String>) -> Self {
        Self {
            expect,
            fingerprint: fingerprint.into(),
            timeout: None,
            allow_partial: false,
        }
    }

    fn effective_timeout(&self) -> Duration {
        if let Some(t) = self.timeout {
            return t;
        }
        std::env::var(TIMEOUT_ENV_VAR)
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .map_or(Duration::from_secs(DEFAULT_TIMEOUT_SECS), Duration::from_secs)
    }
}

/// What a collection run produced: summaries sorted by site id, plus
/// warnings for sites that were expected but never arrived.
#[derive(Debug)]
pub struct CollectOutcome {
    pub summaries: Vec<SiteSummary>,
    pub warnings: Vec<String>,
}

struct Registry {
    by_site: BTreeMap<String, SiteSummary>,
    expect: usize,
}

/// Coordinator-side collection: accepts site connections on `listener` until
/// the expected number of distinct summaries arrived or the deadline passed.
pub fn collect(listener: TcpListener, options: &CollectOptions) -> Result<CollectOutcome> {
    let deadline = Instant::now() + options.effective_timeout();
    listener.set_nonblocking(true)?;
    let registry = Arc::new(Mutex::new(Registry {
        by_site: BTreeMap::new(),
        expect: options.expect,
    }));
    let mut workers = Vec::new();

    loop {
        {
            let reg = registry.lock().expect("registry lock");
            if reg.by_site.len() >= reg.expect {
                break;
            }
        }
        if Instant::now() >= deadline {
            break;
        }
        match listener.accept() {
            Ok((stream, _)) => {
                let registry = Arc::clone(&registry);
                let fingerprint = options.fingerprint.clone();
                let remaining = deadline.saturating_duration_since(Instant::now());
                workers.push(std::thread::spawn(move || {
                    // Connection errors only affect that site; the
                    // coordinator keeps listening.
                    let _ = handle_session(stream, &fingerprint, registry, remaining);
                }));
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    }
    for w in workers {
        let _ = w.join();
    }

    let reg = Arc::try_unwrap(registry)
        .map_err(|_| Error::Protocol("collection workers leaked".into()))?
        .into_inner()
        .expect("registry lock");
    let received = reg.by_site.len();
    let summaries: Vec<SiteSummary> = reg.by_site.into_values().collect();
    let mut warnings = Vec::new();
    if received < options.expect {
        let warning = format!(
            "collected {received} of {} expected site summaries before the deadline",
            options.expect
        );
        if options.allow_partial {
            warnings.push(warning);
        } else {
            return Err(Error::CollectionIncomplete {
                received,
                expected: options.expect,
            });
        }
    }
    Ok(CollectOutcome {
        summaries,
        warnings,
    })
}

fn handle_session(
    mut stream: TcpStream,
    fingerprint: &str,
    registry: Arc<Mutex<Registry>>,
    remaining: Duration,
) -> Result<()> {
    stream.set_nodelay(true).ok();
    let per_read = remaining.max(Duration::from_millis(50));
    stream.set_read_timeout(Some(per_read))?;

    match read_control(&mut stream)? {
        ControlMessage::Hello {
            protocol_version,
            fingerprint: client_fp,
        } => {
            if protocol_version != PROTOCOL_VERSION {
                let rej = Rejection::new(
                    RejectionCode::VersionMismatch,
                    format!("coordinator speaks version {PROTOCOL_VERSION}"),
                );
                write_control(&mut stream, &ControlMessage::Nack(rej))?;
                return Ok(());
            }
            if client_fp != fingerprint {
                let rej = Rejection::new(
                    RejectionCode::ModelMismatch,
                    "model fingerprint does not match this pooling run",
                );
                write_control(&mut stream, &ControlMessage::Nack(rej))?;
                return Ok(());
            }
            write_control(&mut stream, &ControlMessage::Ack)?;
        }
        _ => {
            let rej = Rejection::new(RejectionCode::Refused, "expected HELLO frame");
            write_control(&mut stream, &ControlMessage::Nack(rej))?;
            return Ok(());
        }
    }

    let payload = read_frame(&mut stream)?;
    let response = match validate_summary(&payload, Some(fingerprint)) {
        Ok(summary) => {
            let mut reg = registry.lock().expect("registry lock");
            if reg.by_site.contains_key(&summary.site_id) {
                ControlMessage::Nack(Rejection::new(
                    RejectionCode::DuplicateSite,
                    format!("site `{}` already registered a summary", summary.site_id),
                ))
            } else {
                reg.by_site.insert(summary.site_id.clone(), summary);
                ControlMessage::Ack
            }
        }
        Err(rej) => ControlMessage::Nack(rej),
    };
    write_control(&mut stream, &response)?;
    Ok(())
}

/// File mode: reads every `*.summary.json` in a directory, validates each
/// against the fingerprint, and returns them sorted by site id.
pub fn read_summaries_dir(dir: &Path, expected_fingerprint: Option<&str>) -> Result<Vec<SiteSummary>> {
    let mut by_site: BTreeMap<String, SiteSummary> = BTreeMap::new();
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".summary.json"))
        })
        .collect();
    paths.sort();
    for path in paths {
        let bytes = std::fs::read(&path)?;
        let summary = validate_summary(&bytes, expected_fingerprint).map_err(Error::from)?;
        if by_site.contains_key(&summary.site_id) {
            return Err(Error::DuplicateSite(summary.site_id));
        }
        by_site.insert(summary.site_id.clone(), summary);
    }
    Ok(by_site.into_values().collect())
}

/// Writes each summary as `<site_id>.summary.json` in canonical bytes.
pub fn write_summaries_dir(dir: &Path, summaries: &[SiteSummary]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for summary in summaries {
        let bytes = encode_summary(summary)?;
        let path = dir.join(format!("{}.summary.json", summary.site_id));
        std::fs::write(path, bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::federation::schema::{MapWeight, SummaryEntry};

    fn summary(site_id: &str, fingerprint: &str) -> SiteSummary {
        SiteSummary {
            protocol_version: PROTOCOL_VERSION,
            site_id: site_id.into(),
            model_fingerprint: fingerprint.into(),
            n_obs: 100,
            dof: 96,
            entries: vec![SummaryEntry {
                label: "a*intercept".into(),
                estimate: 1.0,
                sd: 0.5,
                map_row: vec![MapWeight {
                    psi_index: 0,
                    weight: 1.0,
                }],
            }],
        }
    }

    fn local_listener() -> (TcpListener, std::net::SocketAddr) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        (listener, addr)
    }

    #[test]
    fn three_sites_stream_and_all_are_collected() {
        let (listener, addr) = local_listener();
        let fp = "fp".to_string();
        let mut opts = CollectOptions::new(3, fp.clone());
        opts.timeout = Some(Duration::from_secs(10));
        let coordinator = std::thread::spawn(move || collect(listener, &opts));

        let mut clients = Vec::new();
        for id in ["s2", "s1", "s3"] {
            let fp = fp.clone();
            clients.push(std::thread::spawn(move || {
                serve_summary(addr, &summary(id, &fp))
            }));
        }
        for c in clients {
            c.join().unwrap().unwrap();
        }
        let outcome = coordinator.join().unwrap().unwrap();
        let ids: Vec<&str> = outcome.summaries.iter().map(|s| s.site_id.as_str()).collect();
        assert_eq!(ids, ["s1", "s2", "s3"]);
        assert!(outcome.warnings.is_empty());
    }

    #[test]
    fn duplicate_site_id_is_nacked() {
        let (listener, addr) = local_listener();
        let mut opts = CollectOptions::new(2, "fp");
        opts.timeout = Some(Duration::from_secs(3));
        opts.allow_partial = true;
        let coordinator = std::thread::spawn(move || collect(listener, &opts));

        serve_summary(addr, &summary("dup", "fp")).unwrap();
        let second = serve_summary(addr, &summary("dup", "fp"));
        match second {
            Err(Error::SummaryRejected(rej)) => {
                assert_eq!(rej.code, RejectionCode::DuplicateSite)
            }
            other => panic!("expected duplicate rejection, got {other:?}"),
        }
        let outcome = coordinator.join().unwrap().unwrap();
        assert_eq!(outcome.summaries.len(), 1);
        assert_eq!(outcome.warnings.len(), 1);
    }

    #[test]
    fn version_skewed_hello_refuses_session_before_data() {
        let (listener, addr) = local_listener();
        let mut opts = CollectOptions::new(1, "fp");
        opts.timeout = Some(Duration::from_secs(3));
        opts.allow_partial = true;
        let coordinator = std::thread::spawn(move || collect(listener, &opts));

        let mut stream = TcpStream::connect(addr).unwrap();
        write_control(
            &mut stream,
            &ControlMessage::Hello {
                protocol_version: 999,
                fingerprint: "fp".into(),
            },
        )
        .unwrap();
        match read_control(&mut stream).unwrap() {
            ControlMessage::Nack(rej) => assert_eq!(rej.code, RejectionCode::VersionMismatch),
            other => panic!("expected NACK, got {other:?}"),
        }
        drop(stream);
        let outcome = coordinator.join().unwrap().unwrap();
        assert!(outcome.summaries.is_empty());
    }

    #[test]
    fn missing_site_without_allow_partial_is_an_error() {
        let (listener, addr) = local_listener();
        let mut opts = CollectOptions::new(2, "fp");
        opts.timeout = Some(Duration::from_millis(400));
        let coordinator = std::thread::spawn(move || collect(listener, &opts));
        serve_summary(addr, &summary("only_one", "fp")).unwrap();
        match coordinator.join().unwrap() {
            Err(Error::CollectionIncomplete { received, expected }) => {
                assert_eq!((received, expected), (1, 2));
            }
            other => panic!("expected CollectionIncomplete, got {other:?}"),
        }
    }

    #[test]
    fn file_mode_round_trips_through_a_directory() {
        let dir = tempfile::tempdir().unwrap();
        let summaries = vec![summary("s2", "fp"), summary("s1", "fp")];
        write_summaries_dir(dir.path(), &summaries).unwrap();
        let back = read_summaries_dir(dir.path(), Some("fp")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].site_id, "s1");
        assert_eq!(back[1].site_id, "s2");
    }
}
