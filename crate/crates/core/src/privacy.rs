//! Error verification and privacy amplification with Toeplitz hashing over
//! GF(2).
//!
//! The hash of an `n`-bit key with an `(n + m - 1)`-bit seed `s` is
//! `out[j] = XOR_i s[j - i + n - 1] & key[i]` for `j < m`, i.e. the product
//! with the `m x n` Toeplitz matrix whose diagonals are the seed bits. That
//! is a slice of the GF(2) convolution `s * key`, which is how the fast path
//! evaluates it.

use std::io::{self, BufRead, Write};

use rand::RngCore;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::bits::BitString;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PrivacyError {
    #[error("output length {m} exceeds input length {n}")]
    OutputTooLong { n: usize, m: usize },
    #[error("seed has {got} bits, expected {expected}")]
    SeedLength { expected: usize, got: usize },
    #[error("key has {got} bits, hash expects {expected}")]
    KeyLength { expected: usize, got: usize },
    #[error("tag length must be at least 1")]
    EmptyTag,
}

/// Required seed length for an `n -> m` Toeplitz hash.
pub fn seed_len(n: usize, m: usize) -> usize {
    (n + m).saturating_sub(1)
}

/// One member of the Toeplitz family.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HashSpec {
    pub n: usize,
    pub m: usize,
    pub seed: BitString,
}

impl HashSpec {
    pub fn new(n: usize, m: usize, seed: BitString) -> Result<Self, PrivacyError> {
        let spec = Self { n, m, seed };
        spec.validate()?;
        Ok(spec)
    }

    /// Draws a fresh seed.
    pub fn random<R: RngCore + ?Sized>(n: usize, m: usize, rng: &mut R) -> Result<Self, PrivacyError> {
        let seed = BitString::from_words_fn(seed_len(n, m), || rng.next_u64());
        Self::new(n, m, seed)
    }

    pub fn validate(&self) -> Result<(), PrivacyError> {
        if self.m > self.n {
            return Err(PrivacyError::OutputTooLong { n: self.n, m: self.m });
        }
        let expected = seed_len(self.n, self.m);
        if self.seed.len() != expected {
            return Err(PrivacyError::SeedLength {
                expected,
                got: self.seed.len(),
            });
        }
        Ok(())
    }

    /// Row `j` of the matrix, for inspection and tests.
    pub fn row(&self, j: usize) -> BitString {
        (0..self.n).map(|i| self.seed.get(j + self.n - 1 - i)).collect()
    }
}

/// Row-by-row evaluation. Quadratic; meant for small inputs and as the
/// reference for [`pa_hash`].
pub fn naive_hash(key: &BitString, spec: &HashSpec) -> Result<BitString, PrivacyError> {
    check(key, spec)?;
    Ok((0..spec.m).map(|j| key.and_parity(&spec.row(j))).collect())
}

fn check(key: &BitString, spec: &HashSpec) -> Result<(), PrivacyError> {
    spec.validate()?;
    if key.len() != spec.n {
        return Err(PrivacyError::KeyLength {
            expected: spec.n,
            got: key.len(),
        });
    }
    Ok(())
}

/// Below this many matrix entries the direct product is used.
const DIRECT_LIMIT: usize = 1 << 22;

/// Privacy-amplification hash.
pub fn pa_hash(key: &BitString, spec: &HashSpec) -> Result<BitString, PrivacyError> {
    check(key, spec)?;
    if spec.m == 0 {
        return Ok(BitString::new());
    }
    if spec.n.saturating_mul(spec.m) <= DIRECT_LIMIT {
        return Ok(direct_hash(key, spec));
    }
    Ok(convolution_hash(key, spec))
}

/// Word-parallel product: row `j` ANDed with the key equals the seed window
/// `s[j..j + n]` ANDed with the reversed key.
fn direct_hash(key: &BitString, spec: &HashSpec) -> BitString {
    let n = spec.n;
    let rev: BitString = (0..n).map(|i| key.get(n - 1 - i)).collect();
    let rev_words = rev.words();
    let seed = spec.seed.words();
    let word_at = |bit: usize| -> u64 {
        let (w, o) = (bit / 64, bit % 64);
        let lo = seed.get(w).copied().unwrap_or(0) >> o;
        if o == 0 {
            lo
        } else {
            lo | seed.get(w + 1).copied().unwrap_or(0) << (64 - o)
        }
    };
    (0..spec.m)
        .map(|j| {
            let acc = rev_words
                .iter()
                .enumerate()
                .fold(0u64, |acc, (k, &r)| acc ^ (r & word_at(j + 64 * k)));
            acc.count_ones() & 1 == 1
        })
        .collect()
}

/// Blocked FFT convolution. Output block `o` and key block `b` interact
/// through a seed segment that depends only on their offsets; partial
/// products are summed in the frequency domain and reduced mod 2 once.
fn convolution_hash(key: &BitString, spec: &HashSpec) -> BitString {
    let (n, m) = (spec.n, spec.m);
    let block = (n.max(m) / 8).next_power_of_two().clamp(1 << 12, 1 << 20);
    let len = 2 * block;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(len);
    let inv = planner.plan_fft_inverse(len);

    let key_blocks = n.div_ceil(block);
    let key_fft: Vec<Vec<Complex64>> = (0..key_blocks)
        .map(|b| {
            let mut buf = vec![Complex64::default(); len];
            for (i, slot) in buf.iter_mut().enumerate().take(block) {
                let idx = b * block + i;
                if idx < n && key.get(idx) {
                    *slot = Complex64::new(1.0, 0.0);
                }
            }
            fwd.process(&mut buf);
            buf
        })
        .collect();

    let mut out = BitString::zeros(m);
    let mut seg = vec![Complex64::default(); len];
    let mut acc = vec![Complex64::default(); len];
    for o in 0..m.div_ceil(block) {
        acc.iter_mut().for_each(|c| *c = Complex64::default());
        for (b, kf) in key_fft.iter().enumerate() {
            // seed index for local (j', i') is base + j' - i'
            let base = (o * block + n - 1) as isize - (b * block) as isize;
            seg.iter_mut().for_each(|c| *c = Complex64::default());
            for (u, slot) in seg.iter_mut().enumerate().take(2 * block - 1) {
                let idx = base + u as isize - (block as isize - 1);
                if idx >= 0 && (idx as usize) < spec.seed.len() && spec.seed.get(idx as usize) {
                    *slot = Complex64::new(1.0, 0.0);
                }
            }
            fwd.process(&mut seg);
            for ((a, s), k) in acc.iter_mut().zip(&seg).zip(kf) {
                *a += s * k;
            }
        }
        inv.process(&mut acc);
        let scale = 1.0 / len as f64;
        for jl in 0..block {
            let j = o * block + jl;
            if j >= m {
                break;
            }
            let v = (acc[jl + block - 1].re * scale).round() as i64;
            if v & 1 == 1 {
                out.set(j, true);
            }
        }
    }
    out
}

/// Hash tag for error verification. Equal keys always give equal tags;
/// different keys collide with probability at most `2^-tag_len` over the
/// seed.
pub fn verification_tag(key: &BitString, tag_seed: &BitString, tag_len: usize) -> Result<BitString, PrivacyError> {
    if tag_len == 0 {
        return Err(PrivacyError::EmptyTag);
    }
    // Short keys are zero padded so the family stays defined for m > n.
    let n = key.len().max(tag_len);
    let mut padded = key.clone();
    while padded.len() < n {
        padded.push(false);
    }
    let spec = HashSpec::new(n, tag_len, tag_seed.clone())?;
    pa_hash(&padded, &spec)
}

/// Seed length for [`verification_tag`].
pub fn tag_seed_len(key_len: usize, tag_len: usize) -> usize {
    seed_len(key_len.max(tag_len), tag_len)
}

/// Final-key amplification: hashes the corrected X key followed by the
/// corrected Z key down to `spec.m` bits.
pub fn amplify(x_key: &BitString, z_key: &BitString, spec: &HashSpec) -> Result<BitString, PrivacyError> {
    let mut joined = x_key.clone();
    joined.extend_from(z_key);
    pa_hash(&joined, spec)
}

const KEY_FILE_MAGIC: &str = "bqkd-final-key v1";

/// Text header of a final-key file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeyFileHeader {
    pub session_id: String,
    pub length_bits: usize,
    pub config_digest: String,
    pub seed: u64,
}

/// Writes the header lines, a blank line, then the key packed MSB-first.
pub fn write_key_file<W: Write>(mut out: W, key: &BitString, header: &KeyFileHeader) -> io::Result<()> {
    writeln!(out, "{KEY_FILE_MAGIC}")?;
    writeln!(out, "session_id={}", header.session_id)?;
    writeln!(out, "length_bits={}", key.len())?;
    writeln!(out, "config_digest={}", header.config_digest)?;
    writeln!(out, "seed={}", header.seed)?;
    writeln!(out)?;
    out.write_all(&key.to_bytes_msb())
}

pub fn read_key_file<R: BufRead>(mut input: R) -> io::Result<(KeyFileHeader, BitString)> {
    let bad = |what: &str| io::Error::new(io::ErrorKind::InvalidData, what.to_string());
    let mut line = String::new();
    input.read_line(&mut line)?;
    if line.trim_end() != KEY_FILE_MAGIC {
        return Err(bad("not a final-key file"));
    }
    let mut header = KeyFileHeader {
        session_id: String::new(),
        length_bits: 0,
        config_digest: String::new(),
        seed: 0,
    };
    loop {
        line.clear();
        input.read_line(&mut line)?;
        let l = line.trim_end();
        if l.is_empty() {
            break;
        }
        let (k, v) = l.split_once('=').ok_or_else(|| bad("malformed header line"))?;
        match k {
            "session_id" => header.session_id = v.to_string(),
            "length_bits" => header.length_bits = v.parse().map_err(|_| bad("bad length"))?,
            "config_digest" => header.config_digest = v.to_string(),
            "seed" => header.seed = v.parse().map_err(|_| bad("bad seed"))?,
            _ => return Err(bad("unknown header key")),
        }
    }
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let key = BitString::from_bytes_msb(&bytes, header.length_bits).ok_or_else(|| bad("truncated key"))?;
    Ok((header, key))
}
