//! Seeded simulation of the entangled-pair source with a passive, biased
//! basis choice at each station.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("{name} = {value} is outside [{lo}, {hi}]")]
    Range {
        name: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },
    #[error("a session needs at least one round")]
    NoRounds,
    #[error("event record {round}: {reason}")]
    Parse { round: u64, reason: String },
    #[error("event dump i/o: {0}")]
    Io(#[from] std::io::Error),
}

fn in_range(name: &'static str, value: f64, lo: f64, hi: f64) -> Result<(), SourceError> {
    if value.is_nan() || value < lo || value > hi {
        return Err(SourceError::Range { name, value, lo, hi });
    }
    Ok(())
}

/// Measurement basis. `Z` is rectilinear (H/V), `X` diagonal (±45°).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Basis {
    X,
    Z,
}

impl Basis {
    pub fn other(self) -> Basis {
        match self {
            Basis::X => Basis::Z,
            Basis::Z => Basis::X,
        }
    }
}

impl fmt::Display for Basis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Basis::X => "X",
            Basis::Z => "Z",
        })
    }
}

impl FromStr for Basis {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "X" | "x" => Ok(Basis::X),
            "Z" | "z" => Ok(Basis::Z),
            other => Err(format!("unknown basis {other:?}")),
        }
    }
}

/// Converts a polarization-correlation visibility to an error probability.
pub fn visibility_to_error(visibility: f64) -> Result<f64, SourceError> {
    in_range("visibility", visibility, 0.0, 1.0)?;
    Ok((1.0 - visibility) / 2.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceModel {
    /// Bit-error probability when both stations measure X.
    pub p_bx: f64,
    /// Bit-error probability when both stations measure Z.
    pub p_bz: f64,
    /// Pairs per second, used only to label the timeline.
    pub pair_rate: f64,
    /// Probability that a coincidence is accidental (uncorrelated bits).
    pub accidental_prob: f64,
    /// Per-station probability of a double click.
    pub double_click_prob: f64,
}

impl Default for SourceModel {
    fn default() -> Self {
        Self {
            p_bx: 0.054,
            p_bz: 0.012,
            pair_rate: 11_000.0,
            accidental_prob: 0.0,
            double_click_prob: 0.0,
        }
    }
}

impl SourceModel {
    pub fn validate(&self) -> Result<(), SourceError> {
        in_range("p_bx", self.p_bx, 0.0, 1.0)?;
        in_range("p_bz", self.p_bz, 0.0, 1.0)?;
        in_range("pair_rate", self.pair_rate, 0.0, f64::MAX)?;
        in_range("accidental_prob", self.accidental_prob, 0.0, 1.0)?;
        in_range("double_click_prob", self.double_click_prob, 0.0, 1.0)?;
        Ok(())
    }

    pub fn bit_error_prob(&self, basis: Basis) -> f64 {
        match basis {
            Basis::X => self.p_bx,
            Basis::Z => self.p_bz,
        }
    }

    /// Phase-error probability of `basis` for a basis-independent source:
    /// it equals the bit-error probability of the conjugate basis.
    pub fn phase_error_prob(&self, basis: Basis) -> f64 {
        self.bit_error_prob(basis.other())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationModel {
    /// Probability of measuring in Z.
    pub q: f64,
    /// Overall detection efficiency factor.
    pub pre_attenuation: f64,
}

impl StationModel {
    pub fn new(q: f64) -> Self {
        Self {
            q,
            pre_attenuation: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SourceError> {
        in_range("q", self.q, 0.0, 1.0)?;
        if !(self.pre_attenuation > 0.0 && self.pre_attenuation <= 1.0) {
            return Err(SourceError::Range {
                name: "pre_attenuation",
                value: self.pre_attenuation,
                lo: 0.0,
                hi: 1.0,
            });
        }
        Ok(())
    }
}

/// Round flags as a bit set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct RoundFlags(u8);

impl RoundFlags {
    pub const LOST: RoundFlags = RoundFlags(1);
    pub const ACCIDENTAL: RoundFlags = RoundFlags(2);
    pub const DOUBLE_CLICK: RoundFlags = RoundFlags(4);

    pub fn empty() -> Self {
        RoundFlags(0)
    }

    pub fn contains(self, other: RoundFlags) -> bool {
        self.0 & other.0 == other.0
    }

    pub fn insert(&mut self, other: RoundFlags) {
        self.0 |= other.0;
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for RoundFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (Self::LOST, "lost"),
            (Self::ACCIDENTAL, "accidental"),
            (Self::DOUBLE_CLICK, "double_click"),
        ];
        let mut first = true;
        for (flag, name) in names {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

impl FromStr for RoundFlags {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut flags = RoundFlags::empty();
        for part in s.split('|').filter(|p| !p.is_empty()) {
            flags.insert(match part {
                "lost" => Self::LOST,
                "accidental" => Self::ACCIDENTAL,
                "double_click" => Self::DOUBLE_CLICK,
                other => return Err(format!("unknown flag {other:?}")),
            });
        }
        Ok(flags)
    }
}

/// A definite single-station measurement.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Detection {
    pub basis: Basis,
    pub bit: bool,
}

/// The joint outcome of one round, as the simulator sees it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoundOutcome {
    pub round_index: u64,
    pub alice_basis: Basis,
    pub bob_basis: Basis,
    /// `None` on lost rounds and when Alice double-clicked.
    pub alice_bit: Option<bool>,
    /// `None` on lost rounds and when Bob double-clicked.
    pub bob_bit: Option<bool>,
    pub flags: RoundFlags,
}

/// Which party's view of a round to extract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Alice,
    Bob,
}

/// A station's local record of a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalRecord {
    /// No coincidence for this round.
    Lost,
    /// Coincidence, but this station produced no definite outcome.
    DoubleClick,
    Detected(Detection),
}

impl RoundOutcome {
    pub fn is_lost(&self) -> bool {
        self.flags.contains(RoundFlags::LOST)
    }

    pub fn local(&self, role: Role) -> LocalRecord {
        if self.is_lost() {
            return LocalRecord::Lost;
        }
        let (basis, bit) = match role {
            Role::Alice => (self.alice_basis, self.alice_bit),
            Role::Bob => (self.bob_basis, self.bob_bit),
        };
        match bit {
            Some(bit) => LocalRecord::Detected(Detection { basis, bit }),
            None => LocalRecord::DoubleClick,
        }
    }
}

/// Draws one round. Bases are independent Bernoulli(q) per station; for
/// matching bases Bob's bit differs from Alice's with the basis error
/// probability (0.5 on accidental coincidences); mismatched bases give
/// independent bits.
pub fn generate_round<R: Rng + ?Sized>(
    source: &SourceModel,
    alice: &StationModel,
    bob: &StationModel,
    round_index: u64,
    rng: &mut R,
) -> RoundOutcome {
    let mut flags = RoundFlags::empty();
    let alice_basis = if rng.gen_bool(alice.q) { Basis::Z } else { Basis::X };
    let bob_basis = if rng.gen_bool(bob.q) { Basis::Z } else { Basis::X };
    let detect = alice.pre_attenuation * bob.pre_attenuation;
    if detect < 1.0 && !rng.gen_bool(detect) {
        flags.insert(RoundFlags::LOST);
        return RoundOutcome {
            round_index,
            alice_basis,
            bob_basis,
            alice_bit: None,
            bob_bit: None,
            flags,
        };
    }
    let accidental = source.accidental_prob > 0.0 && rng.gen_bool(source.accidental_prob);
    if accidental {
        flags.insert(RoundFlags::ACCIDENTAL);
    }
    let a: bool = rng.gen();
    let b = if alice_basis != bob_basis || accidental {
        rng.gen()
    } else {
        a ^ rng.gen_bool(source.bit_error_prob(alice_basis))
    };
    let mut alice_bit = Some(a);
    let mut bob_bit = Some(b);
    if source.double_click_prob > 0.0 {
        if rng.gen_bool(source.double_click_prob) {
            alice_bit = None;
            flags.insert(RoundFlags::DOUBLE_CLICK);
        }
        if rng.gen_bool(source.double_click_prob) {
            bob_bit = None;
            flags.insert(RoundFlags::DOUBLE_CLICK);
        }
    }
    RoundOutcome {
        round_index,
        alice_basis,
        bob_basis,
        alice_bit,
        bob_bit,
        flags,
    }
}

/// Streaming, reproducible sequence of rounds.
#[derive(Debug, Clone)]
pub struct RoundStream {
    source: SourceModel,
    alice: StationModel,
    bob: StationModel,
    rng: ChaCha8Rng,
    next: u64,
    total: u64,
}

impl Iterator for RoundStream {
    type Item = RoundOutcome;

    fn next(&mut self) -> Option<RoundOutcome> {
        if self.next >= self.total {
            return None;
        }
        let out = generate_round(&self.source, &self.alice, &self.bob, self.next, &mut self.rng);
        self.next += 1;
        Some(out)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.total - self.next) as usize;
        (left, Some(left))
    }
}

impl ExactSizeIterator for RoundStream {}

pub fn simulate_session(
    source: &SourceModel,
    alice: &StationModel,
    bob: &StationModel,
    n_rounds: u64,
    seed: u64,
) -> Result<RoundStream, SourceError> {
    if n_rounds == 0 {
        return Err(SourceError::NoRounds);
    }
    source.validate()?;
    alice.validate()?;
    bob.validate()?;
    Ok(RoundStream {
        source: *source,
        alice: *alice,
        bob: *bob,
        rng: ChaCha8Rng::seed_from_u64(seed),
        next: 0,
        total: n_rounds,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct EventRow {
    round: u64,
    alice_basis: String,
    alice_bit: String,
    bob_basis: String,
    bob_bit: String,
    flags: String,
}

fn bit_str(b: Option<bool>) -> String {
    match b {
        Some(true) => "1".into(),
        Some(false) => "0".into(),
        None => String::new(),
    }
}

/// Writes rounds as `round,alice_basis,alice_bit,bob_basis,bob_bit,flags`.
pub fn write_events<W: Write>(out: W, rounds: impl IntoIterator<Item = RoundOutcome>) -> Result<(), SourceError> {
    let mut w = csv::Writer::from_writer(out);
    for r in rounds {
        w.serialize(EventRow {
            round: r.round_index,
            alice_basis: r.alice_basis.to_string(),
            alice_bit: bit_str(r.alice_bit),
            bob_basis: r.bob_basis.to_string(),
            bob_bit: bit_str(r.bob_bit),
            flags: r.flags.to_string(),
        })
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> SourceError {
    SourceError::Io(std::io::Error::other(e))
}

/// Streaming reader for an event dump.
pub fn read_events<R: Read>(input: R) -> impl Iterator<Item = Result<RoundOutcome, SourceError>> {
    let mut records = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(input)
        .into_records();
    let mut line = 0u64;
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let rec = records.next()?;
        line += 1;
        let parsed = rec
            .map_err(|e| SourceError::Parse {
                round: line - 1,
                reason: e.to_string(),
            })
            .and_then(|rec| parse_event(&rec, line - 1));
        if parsed.is_err() {
            done = true;
        }
        Some(parsed)
    })
}

fn parse_event(rec: &csv::StringRecord, ordinal: u64) -> Result<RoundOutcome, SourceError> {
    let err = |round: u64, reason: String| SourceError::Parse { round, reason };
    if rec.len() != 6 {
        return Err(err(ordinal, format!("expected 6 fields, found {}", rec.len())));
    }
    let round: u64 = rec[0]
        .parse()
        .map_err(|_| err(ordinal, format!("bad round index {:?}", &rec[0])))?;
    let basis = |s: &str| s.parse::<Basis>().map_err(|e| err(round, e));
    let bit = |s: &str| match s {
        "" => Ok(None),
        "0" => Ok(Some(false)),
        "1" => Ok(Some(true)),
        other => Err(err(round, format!("bad bit {other:?}"))),
    };
    let flags: RoundFlags = rec[5].parse().map_err(|e| err(round, e))?;
    let out = RoundOutcome {
        round_index: round,
        alice_basis: basis(&rec[1])?,
        alice_bit: bit(&rec[2])?,
        bob_basis: basis(&rec[3])?,
        bob_bit: bit(&rec[4])?,
        flags,
    };
    if out.is_lost() && (out.alice_bit.is_some() || out.bob_bit.is_some()) {
        return Err(err(round, "lost round carries bits".into()));
    }
    if !out.is_lost() && !flags.contains(RoundFlags::DOUBLE_CLICK) && (out.alice_bit.is_none() || out.bob_bit.is_none()) {
        return Err(err(round, "detected round is missing a bit".into()));
    }
    Ok(out)
}
