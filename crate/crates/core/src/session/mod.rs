//! Two-party session: simulation, sifting, per-basis cascade, verification
//! and a single privacy-amplification step at the end.
//!
//! Alice and Bob are independent state machines that only talk through a
//! [`Transport`]. Each runs the seeded source locally and reads its own view
//! of every round.

mod party;
mod transport;
pub mod wire;

use std::io::{self, Write};
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bits::BitString;
use crate::cascade::{CascadeConfig, CascadeError, Transcript};
use crate::keyrate::KeyRateError;
use crate::privacy::PrivacyError;
use crate::source::{Role, SourceError, SourceModel, StationModel};

pub use party::run_party;
pub use transport::{ChannelTransport, TcpTransport, Transport};
pub use wire::{AbortKind, Message};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("transport error: {0}")]
    Io(#[from] io::Error),
    #[error("peer disconnected")]
    Disconnected,
    #[error("malformed frame: {0}")]
    Decode(String),
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("peer aborted: {reason}")]
    PeerAbort { kind: AbortKind, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Source(#[from] SourceError),
    #[error(transparent)]
    Cascade(#[from] CascadeError),
    #[error(transparent)]
    KeyRate(#[from] KeyRateError),
    #[error(transparent)]
    Privacy(#[from] PrivacyError),
    #[error("undefined ratio: {0}")]
    UndefinedRatio(String),
}

impl SessionError {
    /// Verification failures (tag or final-key mismatch), as opposed to
    /// protocol or transport failures.
    pub fn is_verification(&self) -> bool {
        matches!(
            self,
            SessionError::Verification(_)
                | SessionError::PeerAbort {
                    kind: AbortKind::Verification,
                    ..
                }
        )
    }

    fn abort_kind(&self) -> AbortKind {
        if self.is_verification() {
            AbortKind::Verification
        } else {
            AbortKind::Protocol
        }
    }
}

/// Everything a session needs; both parties must hold equal copies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    pub source: SourceModel,
    pub alice: StationModel,
    pub bob: StationModel,
    pub cascade: CascadeConfig,
    /// Total failure probability of the phase-error estimates.
    pub p_eps: f64,
    pub n_rounds: u64,
    /// Seed of the simulated source.
    pub seed: u64,
    /// Seed of Alice's public randomness (shuffles, tag and hash seeds).
    /// Derived from `seed` when absent.
    pub protocol_seed: Option<u64>,
    /// Target sifted bits per cascade chunk, per basis.
    pub chunk_x: usize,
    pub chunk_z: usize,
    pub tag_len: usize,
    /// Rounds per basis announcement.
    pub sift_batch: usize,
    /// Provenance digest copied into the report.
    pub config_digest: String,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            source: SourceModel::default(),
            alice: StationModel::new(0.5),
            bob: StationModel::new(0.5),
            cascade: CascadeConfig::default(),
            p_eps: 1e-6,
            n_rounds: 100_000,
            seed: 1,
            protocol_seed: None,
            chunk_x: 1208,
            chunk_z: 927,
            tag_len: 40,
            sift_batch: 1 << 16,
            config_digest: String::new(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), SessionError> {
        self.source.validate()?;
        self.alice.validate()?;
        self.bob.validate()?;
        self.cascade.validate()?;
        let bad = |m: &str| Err(SessionError::Config(m.to_string()));
        if !(self.p_eps > 0.0 && self.p_eps < 1.0) {
            return bad("p_eps must lie in (0, 1)");
        }
        if self.n_rounds == 0 {
            return bad("n_rounds must be positive");
        }
        if self.chunk_x == 0 || self.chunk_z == 0 {
            return bad("chunk sizes must be positive");
        }
        if self.tag_len == 0 {
            return bad("tag_len must be positive");
        }
        if self.sift_batch == 0 || self.sift_batch > u32::MAX as usize {
            return bad("sift_batch out of range");
        }
        Ok(())
    }

    pub fn protocol_seed(&self) -> u64 {
        self.protocol_seed.unwrap_or(self.seed ^ 0x9e37_79b9_7f4a_7c15)
    }

    /// Digest of the configuration, used when none was supplied.
    pub fn digest(&self) -> String {
        if !self.config_digest.is_empty() {
            return self.config_digest.clone();
        }
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn session_id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.digest().as_bytes());
        h.update(self.seed.to_be_bytes());
        h.update(self.protocol_seed().to_be_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

/// End-of-session summary. Both parties produce identical reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_id: String,
    pub config_digest: String,
    pub seed: u64,
    pub protocol_seed: u64,
    pub n_rounds: u64,
    pub q_a: f64,
    pub q_b: f64,
    pub raw_len: u64,
    pub sifted_len: u64,
    pub n_xx: u64,
    pub n_zz: u64,
    pub mismatched: u64,
    pub dropped: u64,
    pub errors_x: u64,
    pub errors_z: u64,
    pub qber_x: f64,
    pub qber_z: f64,
    pub chunks_x: u32,
    pub chunks_z: u32,
    pub leak_x: u64,
    pub leak_z: u64,
    pub f_x: Option<f64>,
    pub f_z: Option<f64>,
    pub p_eps_x: f64,
    pub p_eps_z: f64,
    pub eps_x: f64,
    pub eps_z: f64,
    pub final_len: u64,
    pub secure_per_raw: f64,
    pub efficiency_ratio_vs_baseline: Option<f64>,
    pub final_key_sha256: String,
}

impl SessionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }
}

/// Sifted rounds of one basis and which of them were in error, as
/// disclosed by error correction.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BasisErrors {
    pub rounds: Vec<u64>,
    pub errors: BitString,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SessionEvents {
    pub n_rounds: u64,
    pub x: BasisErrors,
    pub z: BasisErrors,
}

/// One party's result.
#[derive(Debug, Clone)]
pub struct PartyOutcome {
    pub role: Role,
    pub report: SessionReport,
    pub final_key: BitString,
    pub transcript_x: Transcript,
    pub transcript_z: Transcript,
    pub events: SessionEvents,
}

/// A failed party run, with whatever transcript had accumulated.
#[derive(Debug)]
pub struct SessionFailure {
    pub error: SessionError,
    pub transcript_x: Transcript,
    pub transcript_z: Transcript,
}

impl From<SessionError> for SessionFailure {
    fn from(error: SessionError) -> Self {
        Self {
            error,
            transcript_x: Transcript::new(),
            transcript_z: Transcript::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    Channel,
    Tcp,
}

/// Both parties' results from a single-process run.
#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub alice: PartyOutcome,
    pub bob: PartyOutcome,
}

impl SessionOutcome {
    pub fn report(&self) -> &SessionReport {
        &self.alice.report
    }
}

/// Runs both parties in this process, one thread each.
pub fn run_session(config: &SessionConfig, kind: TransportKind) -> Result<SessionOutcome, SessionFailure> {
    config.validate()?;
    let (ra, rb) = match kind {
        TransportKind::Channel => {
            let (ta, tb) = ChannelTransport::pair();
            run_pair(config, ta, tb)
        }
        TransportKind::Tcp => {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(SessionError::from)?;
            let addr = listener.local_addr().map_err(SessionError::from)?;
            let cfg = config.clone();
            let alice = thread::spawn(move || {
                let mut t = TcpTransport::accept(&listener)?;
                run_party(Role::Alice, &cfg, &mut t)
            });
            let bob = TcpTransport::connect(addr, Duration::from_secs(10))
                .map_err(SessionFailure::from)
                .and_then(|mut t| run_party(Role::Bob, config, &mut t));
            (alice.join().expect("alice thread panicked"), bob)
        }
    };
    let (alice, bob) = match (ra, rb) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(a), Err(b)) => return Err(prefer_origin(a, b)),
        (Err(e), Ok(_)) | (Ok(_), Err(e)) => return Err(e),
    };
    if alice.final_key != bob.final_key {
        return Err(SessionError::Verification("final keys differ".into()).into());
    }
    if alice.report != bob.report {
        return Err(SessionError::Protocol("parties disagree on the report".into()).into());
    }
    Ok(SessionOutcome { alice, bob })
}

fn run_pair(
    config: &SessionConfig,
    mut ta: ChannelTransport,
    mut tb: ChannelTransport,
) -> (Result<PartyOutcome, SessionFailure>, Result<PartyOutcome, SessionFailure>) {
    let cfg = config.clone();
    let alice = thread::spawn(move || run_party(Role::Alice, &cfg, &mut ta));
    let bob = run_party(Role::Bob, config, &mut tb);
    drop(tb);
    (alice.join().expect("alice thread panicked"), bob)
}

/// Keeps the error of the party that gave up first rather than its peer's
/// reaction to the abort.
fn prefer_origin(a: SessionFailure, b: SessionFailure) -> SessionFailure {
    let secondary = |e: &SessionError| matches!(e, SessionError::PeerAbort { .. } | SessionError::Disconnected);
    if secondary(&a.error) && !secondary(&b.error) {
        b
    } else {
        a
    }
}

/// Ratios of `secure_per_raw` to the baseline report's.
pub fn compare_reports(reports: &[SessionReport], baseline: usize) -> Result<Vec<f64>, SessionError> {
    if reports.len() < 2 {
        return Err(SessionError::UndefinedRatio("need at least two reports".into()));
    }
    let base = reports
        .get(baseline)
        .ok_or_else(|| SessionError::UndefinedRatio(format!("baseline index {baseline} out of range")))?;
    if base.final_len == 0 || base.secure_per_raw <= 0.0 {
        return Err(SessionError::UndefinedRatio("baseline has no secure key".into()));
    }
    Ok(reports.iter().map(|r| r.secure_per_raw / base.secure_per_raw).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QberWindow {
    pub window_index: u64,
    /// `None` when no sifted round of the basis fell in the window.
    pub qber_x: Option<f64>,
    pub qber_z: Option<f64>,
}

pub const MIN_QBER_WINDOW: u64 = 100;

/// Error rates per window of `window` rounds, from the error positions
/// disclosed during reconciliation.
pub fn qber_timeseries(events: &SessionEvents, window: u64) -> Result<Vec<QberWindow>, SessionError> {
    if window < MIN_QBER_WINDOW {
        return Err(SessionError::Config(format!("window must be at least {MIN_QBER_WINDOW} rounds")));
    }
    let buckets = events.n_rounds.div_ceil(window) as usize;
    let tally = |b: &BasisErrors| {
        let mut counts = vec![(0u64, 0u64); buckets];
        for (i, &round) in b.rounds.iter().enumerate() {
            let c = &mut counts[((round / window) as usize).min(buckets - 1)];
            c.0 += 1;
            c.1 += b.errors.get(i) as u64;
        }
        counts
    };
    let (x, z) = (tally(&events.x), tally(&events.z));
    let rate = |(n, e): (u64, u64)| (n > 0).then(|| e as f64 / n as f64);
    Ok((0..buckets)
        .map(|i| QberWindow {
            window_index: i as u64,
            qber_x: rate(x[i]),
            qber_z: rate(z[i]),
        })
        .collect())
}

pub const QBER_HEADER: &str = "window_index,qber_x,qber_z";

pub fn write_qber_csv<W: Write>(mut out: W, series: &[QberWindow]) -> io::Result<()> {
    writeln!(out, "{QBER_HEADER}")?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for w in series {
        writeln!(out, "{},{},{}", w.window_index, fmt(w.qber_x), fmt(w.qber_z))?;
    }
    Ok(())
}
