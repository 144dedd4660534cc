//! Repeated cascade runs on synthetic key pairs, averaged the way the
//! reconciliation tables report them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_cascade, CascadeConfig, CascadeError};
use crate::bits::BitString;
use crate::keyrate::h2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchSummary {
    pub runs: usize,
    pub key_length: usize,
    /// Channel error probability used to generate Bob's key.
    pub channel_qber: f64,
    /// Mean measured error fraction.
    pub qber: f64,
    pub bits_revealed: f64,
    pub bits_revealed_biconf: f64,
    /// Mean revealed bits over `key_length * h2(qber)`.
    pub efficiency: f64,
    pub block_sizes: Vec<usize>,
    /// Mean of `errors_per_pass_per_sequence`.
    pub errors_per_pass_per_sequence: Vec<Vec<f64>>,
    pub errors_biconf: f64,
    pub biconf_rounds: f64,
    /// Runs that ended with Bob's key still differing from Alice's.
    pub residual_failures: usize,
}

/// Runs cascade `runs` times on `n`-bit keys whose bits differ
/// independently with probability `qber`. Blocks are sized from `qber`.
pub fn bench(n: usize, qber: f64, runs: usize, config: &CascadeConfig, seed: u64) -> Result<BenchSummary, CascadeError> {
    config.validate()?;
    if runs == 0 || !(0.0..=0.5).contains(&qber) {
        return Err(CascadeError::Config("need runs > 0 and qber in [0, 0.5]".into()));
    }
    let passes = config.num_passes;
    let mut sum = BenchSummary {
        runs,
        key_length: n,
        channel_qber: qber,
        qber: 0.0,
        bits_revealed: 0.0,
        bits_revealed_biconf: 0.0,
        efficiency: 0.0,
        block_sizes: Vec::new(),
        errors_per_pass_per_sequence: (0..passes).map(|i| vec![0.0; i + 1]).collect(),
        errors_biconf: 0.0,
        biconf_rounds: 0.0,
        residual_failures: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..runs {
        let a = BitString::from_words_fn(n, || rng.gen());
        let b: BitString = a.iter().map(|x| x ^ rng.gen_bool(qber)).collect();
        let out = run_cascade(&a, &b, config, rng.gen(), qber)?;
        let s = &out.stats;
        if out.corrected != a {
            sum.residual_failures += 1;
        }
        sum.qber += a.hamming_distance(&b) as f64 / n.max(1) as f64;
        sum.bits_revealed += s.bits_revealed() as f64;
        sum.bits_revealed_biconf += s.bits_revealed_biconf as f64;
        sum.errors_biconf += s.errors_biconf as f64;
        sum.biconf_rounds += s.biconf_rounds as f64;
        for (acc, row) in sum.errors_per_pass_per_sequence.iter_mut().zip(&s.errors_per_pass_per_sequence) {
            for (x, &v) in acc.iter_mut().zip(row) {
                *x += v as f64;
            }
        }
        if sum.block_sizes.is_empty() {
            sum.block_sizes = s.block_sizes_per_pass.clone();
        }
    }
    let r = runs as f64;
    sum.qber /= r;
    sum.bits_revealed /= r;
    sum.bits_revealed_biconf /= r;
    sum.errors_biconf /= r;
    sum.biconf_rounds /= r;
    sum.errors_per_pass_per_sequence.iter_mut().flatten().for_each(|x| *x /= r);
    let shannon = n as f64 * h2(sum.qber);
    sum.efficiency = if shannon > 0.0 { sum.bits_revealed / shannon } else { f64::NAN };
    Ok(sum)
}
