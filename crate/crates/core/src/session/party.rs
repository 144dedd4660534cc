//! The per-party state machine. Alice answers parity queries and supplies
//! all public randomness; Bob drives reconciliation and corrects his key.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bits::BitString;
use crate::cascade::{
    reconcile, CascadeError, Direction, ParityOracle, ParityQuery, ParityResponder, Transcript, TranscriptEntry,
};
use crate::keyrate::{best_split, deviations, h2, secure_length, secure_length_real, EpsilonBudget, SecureLengthInput};
use crate::privacy::{amplify, tag_seed_len, verification_tag, HashSpec};
use crate::sifting::{decide, BasisCode, BasisKey, SiftCounts, SiftDecision};
use crate::source::{simulate_session, Basis, LocalRecord, Role};

use super::wire::{pack_codes, unpack_codes, Message};
use super::{BasisErrors, PartyOutcome, SessionConfig, SessionError, SessionEvents, SessionFailure, SessionReport, Transport};

type Result<T> = std::result::Result<T, SessionError>;

/// Runs one side of a session over `transport`.
pub fn run_party<T: Transport>(role: Role, config: &SessionConfig, transport: &mut T) -> std::result::Result<PartyOutcome, SessionFailure> {
    let mut party = Party {
        role,
        config,
        t: transport,
        rng: ChaCha8Rng::seed_from_u64(config.protocol_seed()),
        transcript_x: Transcript::new(),
        transcript_z: Transcript::new(),
    };
    let result = config.validate().and_then(|_| party.run());
    result.map_err(|error| {
        if !matches!(error, SessionError::PeerAbort { .. } | SessionError::Disconnected | SessionError::Io(_)) {
            let _ = party.t.send(&Message::Abort {
                kind: error.abort_kind(),
                reason: error.to_string(),
            });
        }
        SessionFailure {
            error,
            transcript_x: std::mem::take(&mut party.transcript_x),
            transcript_z: std::mem::take(&mut party.transcript_z),
        }
    })
}

struct Party<'a, T: Transport> {
    role: Role,
    config: &'a SessionConfig,
    t: &'a mut T,
    /// Alice's public randomness; unused by Bob.
    rng: ChaCha8Rng,
    transcript_x: Transcript,
    transcript_z: Transcript,
}

struct Sifted {
    x: BasisKey,
    z: BasisKey,
    counts: SiftCounts,
}

struct Reconciled {
    /// Alice's key, or Bob's corrected key.
    key: BitString,
    errors: BitString,
    leak: u64,
    chunks: u32,
}

struct Lengths {
    budget: EpsilonBudget,
    eps_x: f64,
    eps_z: f64,
    final_len: u64,
}

fn protocol(msg: impl Into<String>) -> SessionError {
    SessionError::Protocol(msg.into())
}

fn unexpected(want: &str, got: &Message) -> SessionError {
    protocol(format!("expected {want}, got {}", got.name()))
}

/// Splits `n` bits into chunks as close to `target` as possible.
fn chunk_bounds(n: usize, target: usize) -> Vec<(usize, usize)> {
    if n == 0 {
        return Vec::new();
    }
    let count = ((n as f64 / target as f64).round() as usize).max(1);
    let (base, extra) = (n / count, n % count);
    let mut out = Vec::with_capacity(count);
    let mut start = 0;
    for i in 0..count {
        let len = base + usize::from(i < extra);
        out.push((start, start + len));
        start += len;
    }
    out
}

fn key_digest(key: &BitString) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update((key.len() as u64).to_be_bytes());
    h.update(key.to_bytes_msb());
    h.finalize().into()
}

fn efficiency(leak: u64, n: u64, errors: u64) -> Option<f64> {
    let shannon = n as f64 * h2(errors as f64 / n.max(1) as f64);
    (errors > 0 && shannon > 0.0).then(|| leak as f64 / shannon)
}

/// Deviations and final length from end-of-session counts, with the
/// failure budget split to maximize the key length.
fn settle_lengths(s: &Sifted, qber_x: f64, qber_z: f64, leak_x: u64, leak_z: u64, p_eps: f64) -> Result<Lengths> {
    let (n_xx, n_zz) = (s.counts.n_xx, s.counts.n_zz);
    let (e_bx, e_bz) = (qber_x.min(0.5), qber_z.min(0.5));
    let input = |budget: &EpsilonBudget| {
        let (eps_x, eps_z) = deviations(n_xx as f64, n_zz as f64, e_bx, e_bz, budget);
        SecureLengthInput {
            n_xx,
            n_zz,
            e_bx,
            e_bz,
            eps_x,
            eps_z,
            leak_x,
            leak_z,
        }
    };
    let fraction = best_split(|f| secure_length_real(&input(&EpsilonBudget::split(p_eps, f))));
    let budget = EpsilonBudget::split(p_eps, fraction);
    let chosen = input(&budget);
    // A basis that leaked more than its length has no secrecy left at all.
    let final_len = if leak_x > n_xx || leak_z > n_zz {
        0
    } else {
        secure_length(&chosen)?
    };
    Ok(Lengths {
        budget,
        eps_x: chosen.eps_x,
        eps_z: chosen.eps_z,
        final_len,
    })
}

/// Bob's view of Alice: parity queries go over the transport.
struct RemoteOracle<'a, T: Transport> {
    t: &'a mut T,
    transcript: Transcript,
    failure: Option<SessionError>,
}

impl<T: Transport> RemoteOracle<'_, T> {
    fn exchange(&mut self, stage: u16, queries: &[ParityQuery]) -> Result<BitString> {
        self.t.send(&Message::ParityRequest {
            stage,
            queries: queries.to_vec(),
        })?;
        match recv(self.t)? {
            Message::ParityReply { parities } => Ok(parities),
            other => Err(unexpected("ParityBatch reply", &other)),
        }
    }
}

impl<T: Transport> ParityOracle for RemoteOracle<'_, T> {
    fn parities(&mut self, stage: u16, queries: &[ParityQuery]) -> std::result::Result<Vec<bool>, CascadeError> {
        match self.exchange(stage, queries) {
            Ok(bits) => {
                for q in queries.iter().take(bits.len()) {
                    self.transcript.push(TranscriptEntry {
                        direction: Direction::AliceToBob,
                        pass: stage,
                        sequence: q.shuffle,
                        block: q.block,
                        parity_bits: 1,
                    });
                }
                Ok(bits.iter().collect())
            }
            Err(e) => {
                let msg = e.to_string();
                self.failure = Some(e);
                Err(CascadeError::Channel(msg))
            }
        }
    }
}

/// Receives one message, turning an abort frame into an error.
fn recv<T: Transport>(t: &mut T) -> Result<Message> {
    match t.recv()? {
        Message::Abort { kind, reason } => Err(SessionError::PeerAbort { kind, reason }),
        m => Ok(m),
    }
}

impl<T: Transport> Party<'_, T> {
    fn is_alice(&self) -> bool {
        self.role == Role::Alice
    }

    fn recv(&mut self) -> Result<Message> {
        recv(self.t)
    }

    fn run(&mut self) -> Result<PartyOutcome> {
        let cfg = self.config;
        let sifted = self.sift()?;
        let x = self.reconcile(Basis::X, &sifted.x.bits, cfg.chunk_x)?;
        let z = self.reconcile(Basis::Z, &sifted.z.bits, cfg.chunk_z)?;

        let mut joined = x.key.clone();
        joined.extend_from(&z.key);
        self.verify(&joined)?;

        let counts = sifted.counts;
        let errors_x = x.errors.count_ones() as u64;
        let errors_z = z.errors.count_ones() as u64;
        let rate = |e: u64, n: u64| if n == 0 { 0.0 } else { e as f64 / n as f64 };
        let (qber_x, qber_z) = (rate(errors_x, counts.n_xx), rate(errors_z, counts.n_zz));
        let lengths = settle_lengths(&sifted, qber_x, qber_z, x.leak, z.leak, cfg.p_eps)?;

        let final_key = self.amplify(&x.key, &z.key, lengths.final_len)?;
        let digest = self.confirm_digest(&final_key)?;

        let report = SessionReport {
            session_id: cfg.session_id(),
            config_digest: cfg.digest(),
            seed: cfg.seed,
            protocol_seed: cfg.protocol_seed(),
            n_rounds: cfg.n_rounds,
            q_a: cfg.alice.q,
            q_b: cfg.bob.q,
            raw_len: counts.raw,
            sifted_len: counts.sifted(),
            n_xx: counts.n_xx,
            n_zz: counts.n_zz,
            mismatched: counts.mismatched,
            dropped: counts.dropped,
            errors_x,
            errors_z,
            qber_x,
            qber_z,
            chunks_x: x.chunks,
            chunks_z: z.chunks,
            leak_x: x.leak,
            leak_z: z.leak,
            f_x: efficiency(x.leak, counts.n_xx, errors_x),
            f_z: efficiency(z.leak, counts.n_zz, errors_z),
            p_eps_x: lengths.budget.p_eps_x,
            p_eps_z: lengths.budget.p_eps_z,
            eps_x: lengths.eps_x,
            eps_z: lengths.eps_z,
            final_len: lengths.final_len,
            secure_per_raw: rate(lengths.final_len, counts.raw),
            efficiency_ratio_vs_baseline: None,
            final_key_sha256: hex::encode(digest),
        };
        let events = SessionEvents {
            n_rounds: cfg.n_rounds,
            x: BasisErrors {
                rounds: sifted.x.rounds,
                errors: x.errors,
            },
            z: BasisErrors {
                rounds: sifted.z.rounds,
                errors: z.errors,
            },
        };
        Ok(PartyOutcome {
            role: self.role,
            report,
            final_key,
            transcript_x: std::mem::take(&mut self.transcript_x),
            transcript_z: std::mem::take(&mut self.transcript_z),
            events,
        })
    }

    fn sift(&mut self) -> Result<Sifted> {
        let cfg = self.config;
        let mut rounds = simulate_session(&cfg.source, &cfg.alice, &cfg.bob, cfg.n_rounds, cfg.seed)?;
        let mut out = Sifted {
            x: BasisKey::default(),
            z: BasisKey::default(),
            counts: SiftCounts::default(),
        };
        let mut batch: Vec<LocalRecord> = Vec::with_capacity(cfg.sift_batch);
        let mut first = 0u64;
        loop {
            batch.clear();
            batch.extend(rounds.by_ref().take(cfg.sift_batch).map(|r| r.local(self.role)));
            if batch.is_empty() {
                break;
            }
            self.sift_batch(first, &batch, &mut out)?;
            first += batch.len() as u64;
        }
        Ok(out)
    }

    fn sift_batch(&mut self, first_round: u64, records: &[LocalRecord], out: &mut Sifted) -> Result<()> {
        let own: Vec<u8> = records.iter().map(|&r| BasisCode::from(r) as u8).collect();
        let announce = Message::BasisAnnounce {
            first_round,
            count: own.len() as u32,
            codes: pack_codes(&own),
        };
        let peer = if self.is_alice() {
            self.t.send(&announce)?;
            self.recv()?
        } else {
            let m = self.recv()?;
            self.t.send(&announce)?;
            m
        };
        let peer = match peer {
            Message::BasisAnnounce { first_round: f, count, codes } if f == first_round && count as usize == own.len() => {
                unpack_codes(&codes, own.len())
            }
            Message::BasisAnnounce { .. } => return Err(protocol("basis announcement out of step")),
            other => return Err(unexpected("BasisAnnounce", &other)),
        };
        let mut kept = BitString::zeros(own.len());
        for (i, (&mine, &theirs)) in own.iter().zip(&peer).enumerate() {
            let (a, b) = if self.is_alice() { (mine, theirs) } else { (theirs, mine) };
            let d = decide(BasisCode::from_bits(a), BasisCode::from_bits(b));
            out.counts.record(d);
            if let (SiftDecision::Kept(basis), LocalRecord::Detected(det)) = (d, records[i]) {
                kept.set(i, true);
                let key = match basis {
                    Basis::X => &mut out.x,
                    Basis::Z => &mut out.z,
                };
                key.push(det.bit, first_round + i as u64);
            }
        }
        if self.is_alice() {
            self.t.send(&Message::SiftAck { first_round, kept })?;
        } else {
            match self.recv()? {
                Message::SiftAck { first_round: f, kept: theirs } if f == first_round => {
                    if theirs != kept {
                        return Err(protocol("sift bitmaps disagree"));
                    }
                }
                other => return Err(unexpected("SiftAck", &other)),
            }
        }
        Ok(())
    }

    fn reconcile(&mut self, basis: Basis, key: &BitString, target: usize) -> Result<Reconciled> {
        let mut out = Reconciled {
            key: key.clone(),
            errors: BitString::zeros(key.len()),
            leak: 0,
            chunks: 0,
        };
        let mut estimate = self.config.cascade.prior_qber;
        for (c, (start, end)) in chunk_bounds(key.len(), target).into_iter().enumerate() {
            let len = end - start;
            let chunk = key.slice(start, end);
            let (positions, leak, mut transcript) = if self.is_alice() {
                self.answer_chunk(basis, c as u32, chunk, estimate)?
            } else {
                self.correct_chunk(basis, c as u32, chunk, estimate)?
            };
            let mut seen = BitString::zeros(len);
            for &p in &positions {
                let p = p as usize;
                if p >= len || seen.get(p) {
                    return Err(protocol("bad correction position"));
                }
                seen.set(p, true);
                out.errors.set(start + p, true);
                if !self.is_alice() {
                    out.key.flip(start + p);
                }
            }
            out.leak += leak;
            out.chunks += 1;
            match basis {
                Basis::X => self.transcript_x.append(&mut transcript),
                Basis::Z => self.transcript_z.append(&mut transcript),
            }
            estimate = positions.len() as f64 / len as f64;
        }
        Ok(out)
    }

    fn answer_chunk(&mut self, basis: Basis, chunk: u32, key: BitString, estimate: f64) -> Result<(Vec<u32>, u64, Transcript)> {
        let seed = self.rng.next_u64();
        self.t.send(&Message::ShuffleSeed {
            basis,
            chunk,
            len: key.len() as u32,
            seed,
            qber_estimate: estimate,
        })?;
        let mut responder = ParityResponder::new(key, seed);
        let positions = loop {
            match self.recv()? {
                Message::ParityRequest { stage, queries } => {
                    let n = responder.key().len() as u32;
                    if queries.iter().any(|q| q.start > q.end || q.end > n) {
                        return Err(protocol("parity query out of range"));
                    }
                    let bits = responder.answer(stage, &queries);
                    self.t.send(&Message::ParityReply {
                        parities: BitString::from_bools(&bits),
                    })?;
                }
                Message::CorrectionNotice { basis: b, chunk: c, positions } if b == basis && c == chunk => break positions,
                other => return Err(unexpected("ParityBatch or CorrectionNotice", &other)),
            }
        };
        let (_, transcript) = responder.into_parts();
        Ok((positions, transcript.parity_bits(Direction::AliceToBob), transcript))
    }

    fn correct_chunk(&mut self, basis: Basis, chunk: u32, key: BitString, estimate: f64) -> Result<(Vec<u32>, u64, Transcript)> {
        let seed = match self.recv()? {
            Message::ShuffleSeed {
                basis: b,
                chunk: c,
                len,
                seed,
                qber_estimate,
            } => {
                if b != basis || c != chunk || len as usize != key.len() {
                    return Err(protocol("shuffle seed for the wrong chunk"));
                }
                if qber_estimate.to_bits() != estimate.to_bits() {
                    return Err(protocol("parties disagree on the working QBER"));
                }
                seed
            }
            other => return Err(unexpected("ShuffleSeed", &other)),
        };
        let mut corrected = key.clone();
        let mut oracle = RemoteOracle {
            t: &mut *self.t,
            transcript: Transcript::new(),
            failure: None,
        };
        let stats = match reconcile(&mut corrected, &mut oracle, &self.config.cascade, seed, estimate) {
            Ok(s) => s,
            Err(e) => return Err(oracle.failure.take().unwrap_or(SessionError::Cascade(e))),
        };
        let transcript = oracle.transcript;
        if stats.bits_revealed() != transcript.parity_bits(Direction::AliceToBob) {
            return Err(protocol("leak count disagrees with the transcript"));
        }
        let positions: Vec<u32> = (0..key.len()).filter(|&i| key.get(i) != corrected.get(i)).map(|i| i as u32).collect();
        self.t.send(&Message::CorrectionNotice {
            basis,
            chunk,
            positions: positions.clone(),
        })?;
        Ok((positions, stats.bits_revealed(), transcript))
    }

    fn verify(&mut self, key: &BitString) -> Result<()> {
        let tag_len = self.config.tag_len;
        if self.is_alice() {
            let seed = BitString::from_words_fn(tag_seed_len(key.len(), tag_len), || self.rng.next_u64());
            let tag = verification_tag(key, &seed, tag_len)?;
            self.t.send(&Message::VerifyChallenge { seed, tag })?;
            match self.recv()? {
                Message::VerifyVerdict { ok: true } => Ok(()),
                Message::VerifyVerdict { ok: false } => Err(SessionError::Verification("verification tags differ".into())),
                other => Err(unexpected("VerifyTag verdict", &other)),
            }
        } else {
            let (seed, tag) = match self.recv()? {
                Message::VerifyChallenge { seed, tag } => (seed, tag),
                other => return Err(unexpected("VerifyTag challenge", &other)),
            };
            if tag.len() != tag_len || seed.len() != tag_seed_len(key.len(), tag_len) {
                return Err(protocol("verification challenge has the wrong shape"));
            }
            let ok = verification_tag(key, &seed, tag_len)? == tag;
            self.t.send(&Message::VerifyVerdict { ok })?;
            if ok {
                Ok(())
            } else {
                Err(SessionError::Verification("verification tags differ".into()))
            }
        }
    }

    fn amplify(&mut self, x: &BitString, z: &BitString, final_len: u64) -> Result<BitString> {
        let n = x.len() + z.len();
        let m = final_len as usize;
        let spec = if self.is_alice() {
            let spec = HashSpec::random(n, m, &mut self.rng)?;
            self.t.send(&Message::HashSeed {
                input_len: n as u64,
                output_len: final_len,
                seed: spec.seed.clone(),
            })?;
            spec
        } else {
            match self.recv()? {
                Message::HashSeed {
                    input_len,
                    output_len,
                    seed,
                } => {
                    if input_len != n as u64 || output_len != final_len {
                        return Err(protocol("parties disagree on the final key length"));
                    }
                    HashSpec::new(n, m, seed)?
                }
                other => return Err(unexpected("HashSeed", &other)),
            }
        };
        Ok(amplify(x, z, &spec)?)
    }

    fn confirm_digest(&mut self, key: &BitString) -> Result<[u8; 32]> {
        let digest = key_digest(key);
        let mine = Message::FinalKeyDigest { digest };
        let theirs = if self.is_alice() {
            self.t.send(&mine)?;
            self.recv()?
        } else {
            let m = self.recv()?;
            self.t.send(&mine)?;
            m
        };
        match theirs {
            Message::FinalKeyDigest { digest: d } if d == digest => Ok(digest),
            Message::FinalKeyDigest { .. } => Err(SessionError::Verification("final key digests differ".into())),
            other => Err(unexpected("FinalKeyDigest", &other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunking() {
        assert!(chunk_bounds(0, 10).is_empty());
        assert_eq!(chunk_bounds(4, 10), vec![(0, 4)]);
        assert_eq!(chunk_bounds(23, 10), vec![(0, 12), (12, 23)]);
        let c = chunk_bounds(100_003, 1208);
        assert_eq!(c.len(), 83);
        assert_eq!(c.last().unwrap().1, 100_003);
        assert!(c.iter().all(|(s, e)| (1204..=1206).contains(&(e - s))));
    }

    #[test]
    fn efficiency_definition() {
        assert_eq!(efficiency(10, 100, 0), None);
        let f = efficiency(50, 1000, 50).unwrap();
        assert!((f - 50.0 / (1000.0 * h2(0.05))).abs() < 1e-12);
    }
}
