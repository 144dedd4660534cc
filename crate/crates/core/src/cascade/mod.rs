//! Interactive error correction: shuffled cascade passes using BINARY
//! bisection with back-tracking, followed by BICONF confirmation rounds.
//!
//! Bob drives the protocol. He asks Alice, through a [`ParityOracle`], for
//! parities of ranges inside orderings that both sides derive from a shared
//! seed, and corrects his own key. Alice's key is never modified. Every
//! parity Alice discloses is counted as one leaked bit.

mod bench;
mod shuffle;
mod transcript;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bits::BitString;
use crate::keyrate::h2;

pub use bench::{bench, BenchSummary};
pub use shuffle::{permutation, subset_mask, Shuffles, SUBSET_BASE};
pub use transcript::{Direction, Transcript, TranscriptEntry, TRANSCRIPT_HEADER};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CascadeError {
    #[error("keys differ in length: {alice} vs {bob}")]
    LengthMismatch { alice: usize, bob: usize },
    #[error("BINARY needs a block with odd parity mismatch")]
    EvenParity,
    #[error("parity channel failed: {0}")]
    Channel(String),
    #[error("oracle answered {got} parities for {asked} queries")]
    ShortAnswer { asked: usize, got: usize },
    #[error("invalid cascade configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CascadeConfig {
    pub num_passes: usize,
    /// Pass-1 block size is `round(block_constant / e)`.
    pub block_constant: f64,
    /// Confirmation strength; residual error probability below `2^-s`.
    pub s: u32,
    /// QBER assumed before any block of a basis has been corrected.
    pub prior_qber: f64,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        Self {
            num_passes: 3,
            block_constant: 0.86,
            s: 40,
            prior_qber: 0.05,
        }
    }
}

impl CascadeConfig {
    pub fn validate(&self) -> Result<(), CascadeError> {
        if self.s < 1 {
            return Err(CascadeError::Config("s must be at least 1".into()));
        }
        if self.num_passes > (SUBSET_BASE as usize) {
            return Err(CascadeError::Config("too many passes".into()));
        }
        if !(self.block_constant > 0.0 && self.block_constant.is_finite()) {
            return Err(CascadeError::Config("block_constant must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.prior_qber) {
            return Err(CascadeError::Config("prior_qber must be in [0, 0.5]".into()));
        }
        Ok(())
    }

    /// Upper bound on the probability that errors survive confirmation.
    pub fn residual_bound(&self) -> f64 {
        2f64.powi(-(self.s as i32))
    }
}

/// Pass-1 block size for an expected QBER. With no expected errors the
/// whole key is one block.
pub fn initial_block_size(e: f64, c: f64, key_len: usize) -> usize {
    if e <= 0.0 {
        return key_len.max(1);
    }
    ((c / e).round() as usize).max(2)
}

/// A parity request: positions `start..end` of ordering `shuffle`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParityQuery {
    pub shuffle: u32,
    pub block: u32,
    pub start: u32,
    pub end: u32,
}

/// Source of Alice's parities.
pub trait ParityOracle {
    /// Answers `queries` in order. `stage` is the pass the request belongs
    /// to, or `num_passes` for confirmation rounds.
    fn parities(&mut self, stage: u16, queries: &[ParityQuery]) -> Result<Vec<bool>, CascadeError>;
}

/// Alice's side: answers parity queries over her key and logs every
/// disclosed parity.
pub struct ParityResponder {
    key: BitString,
    shuffles: Shuffles,
    transcript: Transcript,
}

impl ParityResponder {
    pub fn new(key: BitString, seed: u64) -> Self {
        let n = key.len();
        Self {
            key,
            shuffles: Shuffles::new(seed, n),
            transcript: Transcript::new(),
        }
    }

    pub fn answer(&mut self, stage: u16, queries: &[ParityQuery]) -> Vec<bool> {
        let mut out = Vec::with_capacity(queries.len());
        for q in queries {
            out.push(self.shuffles.range_parity(&self.key, q.shuffle, q.start as usize, q.end as usize));
            self.transcript.push(TranscriptEntry {
                direction: Direction::AliceToBob,
                pass: stage,
                sequence: q.shuffle,
                block: q.block,
                parity_bits: 1,
            });
        }
        out
    }

    pub fn key(&self) -> &BitString {
        &self.key
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn into_parts(self) -> (BitString, Transcript) {
        (self.key, self.transcript)
    }
}

impl ParityOracle for ParityResponder {
    fn parities(&mut self, stage: u16, queries: &[ParityQuery]) -> Result<Vec<bool>, CascadeError> {
        Ok(self.answer(stage, queries))
    }
}

/// Per-run statistics, mirroring what the reconciliation tables report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CascadeStats {
    pub key_length: usize,
    /// `[pass][sequence]`: errors corrected while processing `pass` by
    /// bisecting a block of pass `sequence`.
    pub errors_per_pass_per_sequence: Vec<Vec<u64>>,
    /// Errors corrected during the confirmation stage, including the ones
    /// found by back-tracking after a confirmation hit.
    pub errors_biconf: u64,
    pub bits_revealed_binary: u64,
    pub bits_revealed_biconf: u64,
    pub block_sizes_per_pass: Vec<usize>,
    /// Confirmation rounds run.
    pub biconf_rounds: u32,
    /// 1-based confirmation rounds whose parity disagreed.
    pub biconf_detections: Vec<u32>,
}

impl CascadeStats {
    pub fn errors_binary(&self) -> u64 {
        self.errors_per_pass_per_sequence.iter().flatten().sum()
    }

    pub fn errors_corrected(&self) -> u64 {
        self.errors_binary() + self.errors_biconf
    }

    pub fn bits_revealed(&self) -> u64 {
        self.bits_revealed_binary + self.bits_revealed_biconf
    }

    pub fn qber(&self) -> f64 {
        if self.key_length == 0 {
            0.0
        } else {
            self.errors_corrected() as f64 / self.key_length as f64
        }
    }

    /// Revealed bits over the Shannon minimum; `None` without errors.
    pub fn efficiency(&self) -> Option<f64> {
        let shannon = self.key_length as f64 * h2(self.qber());
        (shannon > 0.0).then(|| self.bits_revealed() as f64 / shannon)
    }
}

struct Pass {
    id: u32,
    block_size: usize,
    order: Vec<u32>,
    /// Block index of each key position.
    block_of: Vec<u32>,
    odd: BTreeSet<u32>,
}

impl Pass {
    fn block_range(&self, b: u32) -> (usize, usize) {
        let start = b as usize * self.block_size;
        (start, (start + self.block_size).min(self.order.len()))
    }

    fn num_blocks(&self) -> usize {
        self.order.len().div_ceil(self.block_size)
    }
}

struct Bisection {
    shuffle: u32,
    block: u32,
    start: usize,
    end: usize,
    /// Pass index the block belongs to, if any.
    pass: Option<usize>,
}

/// Bob's reconciliation state for one key chunk.
struct Engine<'a, O: ParityOracle> {
    key: &'a mut BitString,
    oracle: &'a mut O,
    config: CascadeConfig,
    shuffles: Shuffles,
    passes: Vec<Pass>,
    stats: CascadeStats,
}

impl<'a, O: ParityOracle> Engine<'a, O> {
    fn ask(&mut self, stage: u16, queries: &[ParityQuery]) -> Result<Vec<bool>, CascadeError> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let answers = self.oracle.parities(stage, queries)?;
        if answers.len() != queries.len() {
            return Err(CascadeError::ShortAnswer {
                asked: queries.len(),
                got: answers.len(),
            });
        }
        if stage as usize >= self.config.num_passes {
            self.stats.bits_revealed_biconf += answers.len() as u64;
        } else {
            self.stats.bits_revealed_binary += answers.len() as u64;
        }
        Ok(answers)
    }

    fn flip(&mut self, pos: u32) {
        self.key.flip(pos as usize);
        for pass in &mut self.passes {
            let b = pass.block_of[pos as usize];
            if !pass.odd.remove(&b) {
                pass.odd.insert(b);
            }
        }
    }

    /// Bisects all given ranges in lock step, each known to hold an odd
    /// number of errors. Returns the located positions.
    fn bisect(&mut self, stage: u16, mut active: Vec<Bisection>) -> Result<Vec<(u32, Option<usize>)>, CascadeError> {
        let mut found = Vec::with_capacity(active.len());
        loop {
            active.retain(|b| {
                if b.end - b.start == 1 {
                    found.push((b.start, b.shuffle, b.pass));
                    false
                } else {
                    true
                }
            });
            if active.is_empty() {
                break;
            }
            let queries: Vec<ParityQuery> = active
                .iter()
                .map(|b| ParityQuery {
                    shuffle: b.shuffle,
                    block: b.block,
                    start: b.start as u32,
                    end: (b.start + (b.end - b.start) / 2) as u32,
                })
                .collect();
            let answers = self.ask(stage, &queries)?;
            for (b, (q, alice)) in active.iter_mut().zip(queries.iter().zip(answers)) {
                let mid = q.end as usize;
                let bob = self.shuffles.range_parity(&*self.key, b.shuffle, b.start, mid);
                if bob != alice {
                    b.end = mid;
                } else {
                    b.start = mid;
                }
            }
        }
        Ok(found
            .into_iter()
            .map(|(idx, shuffle, pass)| (self.shuffles.order(shuffle)[idx], pass))
            .collect())
    }

    /// Corrects odd blocks until every pass so far has even mismatch in all
    /// blocks. Smaller (earlier) passes are served first.
    fn settle(&mut self, stage: u16) -> Result<u64, CascadeError> {
        let mut corrected = 0;
        while let Some(j) = self.passes.iter().position(|p| !p.odd.is_empty()) {
            let pass = &self.passes[j];
            let work: Vec<Bisection> = pass
                .odd
                .iter()
                .map(|&b| {
                    let (start, end) = pass.block_range(b);
                    Bisection {
                        shuffle: pass.id,
                        block: b,
                        start,
                        end,
                        pass: Some(j),
                    }
                })
                .collect();
            for (pos, seq) in self.bisect(stage, work)? {
                self.flip(pos);
                corrected += 1;
                if (stage as usize) < self.config.num_passes {
                    let seq = seq.expect("pass bisection");
                    self.stats.errors_per_pass_per_sequence[stage as usize][seq] += 1;
                } else {
                    self.stats.errors_biconf += 1;
                }
            }
        }
        Ok(corrected)
    }

    fn run_pass(&mut self, i: usize, k1: usize) -> Result<(), CascadeError> {
        let n = self.key.len();
        let block_size = k1.saturating_mul(1usize << i.min(40)).clamp(1, n.max(1));
        let id = i as u32;
        let order = self.shuffles.order(id).to_vec();
        let mut block_of = vec![0u32; n];
        for (idx, &pos) in order.iter().enumerate() {
            block_of[pos as usize] = (idx / block_size) as u32;
        }
        let mut pass = Pass {
            id,
            block_size,
            order,
            block_of,
            odd: BTreeSet::new(),
        };
        self.stats.block_sizes_per_pass.push(block_size);
        let queries: Vec<ParityQuery> = (0..pass.num_blocks() as u32)
            .map(|b| {
                let (start, end) = pass.block_range(b);
                ParityQuery {
                    shuffle: id,
                    block: b,
                    start: start as u32,
                    end: end as u32,
                }
            })
            .collect();
        let answers = self.ask(i as u16, &queries)?;
        for (q, alice) in queries.iter().zip(answers) {
            let bob = self.key.parity_of(&pass.order[q.start as usize..q.end as usize]);
            if bob != alice {
                pass.odd.insert(q.block);
            }
        }
        self.passes.push(pass);
        self.settle(i as u16)?;
        Ok(())
    }

    fn confirm(&mut self) -> Result<(), CascadeError> {
        let stage = self.config.num_passes as u16;
        let s = self.config.s;
        let mut clean = 0u32;
        let mut next_round = 0u32;
        while clean < s {
            let ids: Vec<u32> = (0..s - clean).map(|r| SUBSET_BASE + next_round + r).collect();
            next_round += ids.len() as u32;
            let queries: Vec<ParityQuery> = ids
                .iter()
                .map(|&id| ParityQuery {
                    shuffle: id,
                    block: 0,
                    start: 0,
                    end: self.shuffles.len_of(id) as u32,
                })
                .collect();
            let answers = self.ask(stage, &queries)?;
            for (q, alice) in queries.iter().zip(answers) {
                self.stats.biconf_rounds += 1;
                let bob = self.shuffles.range_parity(&*self.key, q.shuffle, 0, q.end as usize);
                if bob == alice {
                    clean += 1;
                    continue;
                }
                clean = 0;
                self.stats.biconf_detections.push(q.shuffle - SUBSET_BASE + 1);
                let work = vec![Bisection {
                    shuffle: q.shuffle,
                    block: 0,
                    start: 0,
                    end: q.end as usize,
                    pass: None,
                }];
                for (pos, _) in self.bisect(stage, work)? {
                    self.flip(pos);
                    self.stats.errors_biconf += 1;
                }
                self.settle(stage)?;
            }
            self.shuffles.forget_subsets();
        }
        Ok(())
    }
}

/// Corrects `key_b` towards Alice's key. `seed` fixes the shuffles and
/// confirmation subsets; `qber_estimate` sizes the first pass.
pub fn reconcile<O: ParityOracle>(
    key_b: &mut BitString,
    oracle: &mut O,
    config: &CascadeConfig,
    seed: u64,
    qber_estimate: f64,
) -> Result<CascadeStats, CascadeError> {
    config.validate()?;
    let n = key_b.len();
    let mut engine = Engine {
        shuffles: Shuffles::new(seed, n),
        key: key_b,
        oracle,
        config: *config,
        passes: Vec::with_capacity(config.num_passes),
        stats: CascadeStats {
            key_length: n,
            errors_per_pass_per_sequence: (0..config.num_passes).map(|i| vec![0; i + 1]).collect(),
            ..CascadeStats::default()
        },
    };
    if n == 0 {
        return Ok(engine.stats);
    }
    let k1 = initial_block_size(qber_estimate, config.block_constant, n);
    for i in 0..config.num_passes {
        engine.run_pass(i, k1)?;
    }
    engine.confirm()?;
    Ok(engine.stats)
}

/// Result of a local cascade run.
#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub corrected: BitString,
    pub stats: CascadeStats,
    pub transcript: Transcript,
}

/// Runs cascade with Alice's key held locally.
pub fn run_cascade(
    key_a: &BitString,
    key_b: &BitString,
    config: &CascadeConfig,
    seed: u64,
    qber_estimate: f64,
) -> Result<CascadeOutcome, CascadeError> {
    if key_a.len() != key_b.len() {
        return Err(CascadeError::LengthMismatch {
            alice: key_a.len(),
            bob: key_b.len(),
        });
    }
    let mut responder = ParityResponder::new(key_a.clone(), seed);
    let mut corrected = key_b.clone();
    let stats = reconcile(&mut corrected, &mut responder, config, seed, qber_estimate)?;
    let (_, transcript) = responder.into_parts();
    Ok(CascadeOutcome {
        corrected,
        stats,
        transcript,
    })
}

/// BICONF on its own: `s` clean random-subset rounds, each disagreement
/// resolved by BINARY on the subset. Returns the corrected key and the
/// number of parities revealed.
pub fn biconf(key_a: &BitString, key_b: &BitString, s: u32, seed: u64) -> Result<(BitString, CascadeStats), CascadeError> {
    let config = CascadeConfig {
        num_passes: 0,
        s,
        ..CascadeConfig::default()
    };
    let out = run_cascade(key_a, key_b, &config, seed, 0.0)?;
    Ok((out.corrected, out.stats))
}

/// BINARY on one block pair with an odd number of differences: locates and
/// fixes one differing position. Returns the position and the parities
/// revealed, counting the block's own parity.
pub fn binary_correct(block_a: &BitString, block_b: &mut BitString) -> Result<(usize, u32), CascadeError> {
    if block_a.len() != block_b.len() {
        return Err(CascadeError::LengthMismatch {
            alice: block_a.len(),
            bob: block_b.len(),
        });
    }
    if block_a.parity() == block_b.parity() {
        return Err(CascadeError::EvenParity);
    }
    let parity = |k: &BitString, s: usize, e: usize| (s..e).fold(false, |acc, i| acc ^ k.get(i));
    let mut revealed = 1;
    let (mut start, mut end) = (0, block_a.len());
    while end - start > 1 {
        let mid = start + (end - start) / 2;
        revealed += 1;
        if parity(block_a, start, mid) != parity(block_b, start, mid) {
            end = mid;
        } else {
            start = mid;
        }
    }
    block_b.flip(start);
    Ok((start, revealed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy_pair(n: usize, p: f64, seed: u64) -> (BitString, BitString) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: BitString = (0..n).map(|_| rng.gen::<bool>()).collect();
        let b: BitString = a.iter().map(|x| x ^ rng.gen_bool(p)).collect();
        (a, b)
    }

    #[test]
    fn block_size_rule() {
        assert_eq!(initial_block_size(0.054, 0.86, 1000), 16);
        assert_eq!(initial_block_size(0.012, 0.86, 1000), 72);
        assert_eq!(initial_block_size(0.5, 0.86, 1000), 2);
        assert_eq!(initial_block_size(0.0, 0.86, 1000), 1000);
    }

    #[test]
    fn binary_single_error_all_positions() {
        for pos in 0..16 {
            let a = BitString::zeros(16);
            let mut b = a.clone();
            b.flip(pos);
            let (found, revealed) = binary_correct(&a, &mut b).unwrap();
            assert_eq!(found, pos);
            assert!(revealed <= 5);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn binary_length_one() {
        let a = BitString::parse("1").unwrap();
        let mut b = BitString::parse("0").unwrap();
        assert_eq!(binary_correct(&a, &mut b).unwrap(), (0, 1));
    }

    #[test]
    fn binary_rejects_even_block() {
        let a = BitString::parse("1100").unwrap();
        let mut b = BitString::parse("0000").unwrap();
        assert_eq!(binary_correct(&a, &mut b), Err(CascadeError::EvenParity));
    }

    #[test]
    fn binary_three_errors_fixes_exactly_one() {
        let a = BitString::zeros(8);
        for mask in 0u32..256 {
            if mask.count_ones() != 3 {
                continue;
            }
            let mut b: BitString = (0..8).map(|i| mask >> i & 1 == 1).collect();
            let (pos, _) = binary_correct(&a, &mut b).unwrap();
            assert!(mask >> pos & 1 == 1);
            assert_eq!(a.hamming_distance(&b), 2);
        }
    }

    #[test]
    fn identical_keys_reveal_only_top_level() {
        let (a, _) = noisy_pair(1000, 0.0, 1);
        let cfg = CascadeConfig::default();
        let out = run_cascade(&a, &a, &cfg, 7, 0.05).unwrap();
        assert_eq!(out.stats.errors_corrected(), 0);
        let blocks: u64 = out.stats.block_sizes_per_pass.iter().map(|&k| 1000usize.div_ceil(k) as u64).sum();
        assert_eq!(out.stats.bits_revealed_binary, blocks);
        assert_eq!(out.stats.bits_revealed_biconf, 40);
        assert_eq!(out.corrected, a);
    }

    #[test]
    fn corrects_and_accounts() {
        let (a, b) = noisy_pair(4000, 0.05, 2);
        let d = a.hamming_distance(&b) as u64;
        let out = run_cascade(&a, &b, &CascadeConfig::default(), 11, 0.05).unwrap();
        assert_eq!(out.corrected, a);
        assert_eq!(out.stats.errors_corrected(), d);
        assert_eq!(out.transcript.parity_bits(Direction::AliceToBob), out.stats.bits_revealed());
        assert_eq!(out.stats.block_sizes_per_pass, vec![17, 34, 68]);
        let f = out.stats.efficiency().unwrap();
        assert!(f > 1.0 && f < 2.0, "f = {f}");
    }

    #[test]
    fn deterministic_transcript() {
        let (a, b) = noisy_pair(2000, 0.03, 3);
        let cfg = CascadeConfig::default();
        let x = run_cascade(&a, &b, &cfg, 5, 0.03).unwrap();
        let y = run_cascade(&a, &b, &cfg, 5, 0.03).unwrap();
        assert_eq!(x.transcript, y.transcript);
        assert_eq!(x.stats, y.stats);
    }

    #[test]
    fn biconf_equal_keys() {
        let (a, _) = noisy_pair(500, 0.0, 4);
        let (out, stats) = biconf(&a, &a, 40, 1).unwrap();
        assert_eq!(out, a);
        assert_eq!(stats.bits_revealed(), 40);
        assert_eq!(stats.errors_corrected(), 0);
    }

    #[test]
    fn biconf_finds_planted_error() {
        let (a, _) = noisy_pair(256, 0.0, 5);
        let mut b = a.clone();
        b.flip(100);
        let (out, stats) = biconf(&a, &b, 20, 9).unwrap();
        assert_eq!(out, a);
        assert_eq!(stats.errors_biconf, 1);
        assert_eq!(stats.biconf_detections.len(), 1);
        let first = stats.biconf_detections[0];
        assert_eq!(stats.biconf_rounds, 20 + first);
    }

    #[test]
    fn residual_bound_constant() {
        let b = CascadeConfig::default().residual_bound();
        assert!((b - 9.09e-13).abs() / 9.09e-13 < 0.005);
    }

    #[test]
    fn transcript_csv_round_trip() {
        let (a, b) = noisy_pair(500, 0.05, 6);
        let out = run_cascade(&a, &b, &CascadeConfig::default(), 3, 0.05).unwrap();
        let mut buf = Vec::new();
        out.transcript.write_csv(&mut buf).unwrap();
        let back = Transcript::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, out.transcript);
    }

    struct FailingOracle;
    impl ParityOracle for FailingOracle {
        fn parities(&mut self, _: u16, _: &[ParityQuery]) -> Result<Vec<bool>, CascadeError> {
            Err(CascadeError::Channel("closed".into()))
        }
    }

    #[test]
    fn channel_failure_aborts() {
        let mut key = BitString::zeros(100);
        let err = reconcile(&mut key, &mut FailingOracle, &CascadeConfig::default(), 1, 0.05).unwrap_err();
        assert!(matches!(err, CascadeError::Channel(_)));
    }

    #[test]
    fn empty_key_is_noop() {
        let out = run_cascade(&BitString::new(), &BitString::new(), &CascadeConfig::default(), 1, 0.05).unwrap();
        assert_eq!(out.stats.bits_revealed(), 0);
    }
}
