//! Basis reconciliation: keeps rounds where both stations measured in the
//! same basis and splits them into per-basis keys.

use serde::{Deserialize, Serialize};

use crate::bits::BitString;
use crate::source::{Basis, LocalRecord, Role, RoundOutcome, SourceError};

/// Z-basis probabilities of the two stations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BiasConfig {
    pub q_a: f64,
    pub q_b: f64,
}

impl BiasConfig {
    pub fn new(q_a: f64, q_b: f64) -> Self {
        Self { q_a, q_b }
    }
}

/// Expected sifted fraction of raw rounds, and the Z share of the sifted
/// rounds.
pub fn expected_sift_fraction(bias: &BiasConfig) -> (f64, f64) {
    let zz = bias.q_a * bias.q_b;
    let total = zz + (1.0 - bias.q_a) * (1.0 - bias.q_b);
    let z_share = if total > 0.0 { zz / total } else { 0.0 };
    (total, z_share)
}

/// Two-bit code a station announces for each round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum BasisCode {
    Lost = 0,
    X = 1,
    Z = 2,
    DoubleClick = 3,
}

impl BasisCode {
    pub fn from_bits(v: u8) -> BasisCode {
        match v & 3 {
            0 => BasisCode::Lost,
            1 => BasisCode::X,
            2 => BasisCode::Z,
            _ => BasisCode::DoubleClick,
        }
    }

    pub fn basis(self) -> Option<Basis> {
        match self {
            BasisCode::X => Some(Basis::X),
            BasisCode::Z => Some(Basis::Z),
            _ => None,
        }
    }
}

impl From<LocalRecord> for BasisCode {
    fn from(r: LocalRecord) -> Self {
        match r {
            LocalRecord::Lost => BasisCode::Lost,
            LocalRecord::DoubleClick => BasisCode::DoubleClick,
            LocalRecord::Detected(d) => match d.basis {
                Basis::X => BasisCode::X,
                Basis::Z => BasisCode::Z,
            },
        }
    }
}

/// Classification of one round from the two announced codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiftDecision {
    /// Not a coincidence; not counted as raw.
    Lost,
    /// A coincidence with at least one double click.
    Dropped,
    Mismatched,
    Kept(Basis),
}

pub fn decide(a: BasisCode, b: BasisCode) -> SiftDecision {
    use BasisCode::*;
    match (a, b) {
        (Lost, _) | (_, Lost) => SiftDecision::Lost,
        (DoubleClick, _) | (_, DoubleClick) => SiftDecision::Dropped,
        (X, X) => SiftDecision::Kept(Basis::X),
        (Z, Z) => SiftDecision::Kept(Basis::Z),
        _ => SiftDecision::Mismatched,
    }
}

/// Round accounting. `raw = matched + mismatched + dropped`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiftCounts {
    pub raw: u64,
    pub n_xx: u64,
    pub n_zz: u64,
    pub mismatched: u64,
    pub dropped: u64,
    pub lost: u64,
}

impl SiftCounts {
    pub fn record(&mut self, d: SiftDecision) {
        match d {
            SiftDecision::Lost => self.lost += 1,
            SiftDecision::Dropped => {
                self.raw += 1;
                self.dropped += 1;
            }
            SiftDecision::Mismatched => {
                self.raw += 1;
                self.mismatched += 1;
            }
            SiftDecision::Kept(Basis::X) => {
                self.raw += 1;
                self.n_xx += 1;
            }
            SiftDecision::Kept(Basis::Z) => {
                self.raw += 1;
                self.n_zz += 1;
            }
        }
    }

    pub fn sifted(&self) -> u64 {
        self.n_xx + self.n_zz
    }
}

/// One party's sifted key for one basis, with the round each bit came from.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BasisKey {
    pub bits: BitString,
    pub rounds: Vec<u64>,
}

impl BasisKey {
    pub fn push(&mut self, bit: bool, round: u64) {
        self.bits.push(bit);
        self.rounds.push(round);
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Both parties' sifted keys, aligned per basis.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SiftedKeys {
    pub x_a: BasisKey,
    pub x_b: BasisKey,
    pub z_a: BasisKey,
    pub z_b: BasisKey,
    pub counts: SiftCounts,
}

impl SiftedKeys {
    pub fn n_xx(&self) -> u64 {
        self.counts.n_xx
    }

    pub fn n_zz(&self) -> u64 {
        self.counts.n_zz
    }

    /// Raw rounds, `N`.
    pub fn raw(&self) -> u64 {
        self.counts.raw
    }

    pub fn add(&mut self, r: &RoundOutcome) {
        let a = r.local(Role::Alice);
        let b = r.local(Role::Bob);
        let d = decide(a.into(), b.into());
        self.counts.record(d);
        if let (SiftDecision::Kept(basis), LocalRecord::Detected(da), LocalRecord::Detected(db)) = (d, a, b) {
            let (ka, kb) = match basis {
                Basis::X => (&mut self.x_a, &mut self.x_b),
                Basis::Z => (&mut self.z_a, &mut self.z_b),
            };
            ka.push(da.bit, r.round_index);
            kb.push(db.bit, r.round_index);
        }
    }
}

/// Sifts a stream of joint outcomes, keeping round order.
pub fn sift(rounds: impl IntoIterator<Item = RoundOutcome>) -> SiftedKeys {
    let mut keys = SiftedKeys::default();
    for r in rounds {
        keys.add(&r);
    }
    keys
}

/// Sifts a replayed event dump; the first malformed record aborts.
pub fn sift_replay(rounds: impl IntoIterator<Item = Result<RoundOutcome, SourceError>>) -> Result<SiftedKeys, SourceError> {
    let mut keys = SiftedKeys::default();
    for r in rounds {
        keys.add(&r?);
    }
    Ok(keys)
}
