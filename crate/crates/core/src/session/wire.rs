//! Framed messages: 4-byte big-endian payload length, 1-byte type, payload.

use std::io::{self, Read, Write};

use crate::bits::BitString;
use crate::cascade::ParityQuery;
use crate::source::Basis;

use super::SessionError;

pub const BASIS_ANNOUNCE: u8 = 0x01;
pub const SIFT_ACK: u8 = 0x02;
pub const SHUFFLE_SEED: u8 = 0x10;
pub const PARITY_BATCH: u8 = 0x11;
pub const CORRECTION_NOTICE: u8 = 0x12;
pub const VERIFY_TAG: u8 = 0x20;
pub const HASH_SEED: u8 = 0x30;
pub const FINAL_KEY_DIGEST: u8 = 0x31;
pub const ABORT: u8 = 0x7F;

const MAX_FRAME: u32 = 1 << 30;

/// Why a party gave up; carried in the abort frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum AbortKind {
    Protocol = 3,
    Verification = 4,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    /// Two-bit basis codes for `count` consecutive rounds.
    BasisAnnounce { first_round: u64, count: u32, codes: Vec<u8> },
    /// Bitmap of kept rounds in the batch.
    SiftAck { first_round: u64, kept: BitString },
    ShuffleSeed { basis: Basis, chunk: u32, len: u32, seed: u64, qber_estimate: f64 },
    ParityRequest { stage: u16, queries: Vec<ParityQuery> },
    ParityReply { parities: BitString },
    /// Positions Bob flipped in the chunk; closes the chunk.
    CorrectionNotice { basis: Basis, chunk: u32, positions: Vec<u32> },
    VerifyChallenge { seed: BitString, tag: BitString },
    VerifyVerdict { ok: bool },
    HashSeed { input_len: u64, output_len: u64, seed: BitString },
    FinalKeyDigest { digest: [u8; 32] },
    Abort { kind: AbortKind, reason: String },
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::BasisAnnounce { .. } => BASIS_ANNOUNCE,
            Message::SiftAck { .. } => SIFT_ACK,
            Message::ShuffleSeed { .. } => SHUFFLE_SEED,
            Message::ParityRequest { .. } | Message::ParityReply { .. } => PARITY_BATCH,
            Message::CorrectionNotice { .. } => CORRECTION_NOTICE,
            Message::VerifyChallenge { .. } | Message::VerifyVerdict { .. } => VERIFY_TAG,
            Message::HashSeed { .. } => HASH_SEED,
            Message::FinalKeyDigest { .. } => FINAL_KEY_DIGEST,
            Message::Abort { .. } => ABORT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Message::BasisAnnounce { .. } => "BasisAnnounce",
            Message::SiftAck { .. } => "SiftAck",
            Message::ShuffleSeed { .. } => "ShuffleSeed",
            Message::ParityRequest { .. } => "ParityBatch(request)",
            Message::ParityReply { .. } => "ParityBatch(reply)",
            Message::CorrectionNotice { .. } => "CorrectionNotice",
            Message::VerifyChallenge { .. } => "VerifyTag(challenge)",
            Message::VerifyVerdict { .. } => "VerifyTag(verdict)",
            Message::HashSeed { .. } => "HashSeed",
            Message::FinalKeyDigest { .. } => "FinalKeyDigest",
            Message::Abort { .. } => "Abort",
        }
    }

    /// Full frame including the length prefix and type byte.
    pub fn encode(&self) -> Vec<u8> {
        let mut p = Vec::new();
        match self {
            Message::BasisAnnounce { first_round, count, codes } => {
                put_u64(&mut p, *first_round);
                put_u32(&mut p, *count);
                p.extend_from_slice(codes);
            }
            Message::SiftAck { first_round, kept } => {
                put_u64(&mut p, *first_round);
                put_bits(&mut p, kept);
            }
            Message::ShuffleSeed { basis, chunk, len, seed, qber_estimate } => {
                p.push(basis_byte(*basis));
                put_u32(&mut p, *chunk);
                put_u32(&mut p, *len);
                put_u64(&mut p, *seed);
                put_u64(&mut p, qber_estimate.to_bits());
            }
            Message::ParityRequest { stage, queries } => {
                p.push(0);
                p.extend_from_slice(&stage.to_be_bytes());
                put_u32(&mut p, queries.len() as u32);
                for q in queries {
                    for v in [q.shuffle, q.block, q.start, q.end] {
                        put_u32(&mut p, v);
                    }
                }
            }
            Message::ParityReply { parities } => {
                p.push(1);
                put_bits(&mut p, parities);
            }
            Message::CorrectionNotice { basis, chunk, positions } => {
                p.push(basis_byte(*basis));
                put_u32(&mut p, *chunk);
                put_u32(&mut p, positions.len() as u32);
                for &pos in positions {
                    put_u32(&mut p, pos);
                }
            }
            Message::VerifyChallenge { seed, tag } => {
                p.push(0);
                put_bits(&mut p, seed);
                put_bits(&mut p, tag);
            }
            Message::VerifyVerdict { ok } => {
                p.push(1);
                p.push(*ok as u8);
            }
            Message::HashSeed { input_len, output_len, seed } => {
                put_u64(&mut p, *input_len);
                put_u64(&mut p, *output_len);
                put_bits(&mut p, seed);
            }
            Message::FinalKeyDigest { digest } => p.extend_from_slice(digest),
            Message::Abort { kind, reason } => {
                p.push(*kind as u8);
                p.extend_from_slice(reason.as_bytes());
            }
        }
        let mut frame = Vec::with_capacity(p.len() + 5);
        put_u32(&mut frame, p.len() as u32);
        frame.push(self.type_byte());
        frame.extend_from_slice(&p);
        frame
    }

    /// Decodes one complete frame.
    pub fn decode(frame: &[u8]) -> Result<Message, SessionError> {
        let mut r = Cursor { buf: frame, pos: 0 };
        let len = r.u32()? as usize;
        let ty = r.u8()?;
        if frame.len() != len + 5 {
            return Err(decode_err(format!("frame length {} does not match header {len}", frame.len() - 5)));
        }
        let msg = match ty {
            BASIS_ANNOUNCE => {
                let first_round = r.u64()?;
                let count = r.u32()?;
                let codes = r.rest().to_vec();
                if codes.len() != (count as usize).div_ceil(4) {
                    return Err(decode_err("basis code count mismatch"));
                }
                Message::BasisAnnounce { first_round, count, codes }
            }
            SIFT_ACK => Message::SiftAck {
                first_round: r.u64()?,
                kept: r.bits()?,
            },
            SHUFFLE_SEED => Message::ShuffleSeed {
                basis: r.basis()?,
                chunk: r.u32()?,
                len: r.u32()?,
                seed: r.u64()?,
                qber_estimate: f64::from_bits(r.u64()?),
            },
            PARITY_BATCH => match r.u8()? {
                0 => {
                    let stage = u16::from_be_bytes([r.u8()?, r.u8()?]);
                    let n = r.u32()? as usize;
                    if n.saturating_mul(16) > r.remaining() {
                        return Err(decode_err("truncated parity request"));
                    }
                    let mut queries = Vec::with_capacity(n);
                    for _ in 0..n {
                        queries.push(ParityQuery {
                            shuffle: r.u32()?,
                            block: r.u32()?,
                            start: r.u32()?,
                            end: r.u32()?,
                        });
                    }
                    Message::ParityRequest { stage, queries }
                }
                1 => Message::ParityReply { parities: r.bits()? },
                other => return Err(decode_err(format!("unknown parity sub-type {other}"))),
            },
            CORRECTION_NOTICE => {
                let basis = r.basis()?;
                let chunk = r.u32()?;
                let n = r.u32()? as usize;
                if n.saturating_mul(4) > r.remaining() {
                    return Err(decode_err("truncated correction notice"));
                }
                let positions = (0..n).map(|_| r.u32()).collect::<Result<_, _>>()?;
                Message::CorrectionNotice { basis, chunk, positions }
            }
            VERIFY_TAG => match r.u8()? {
                0 => Message::VerifyChallenge {
                    seed: r.bits()?,
                    tag: r.bits()?,
                },
                1 => Message::VerifyVerdict { ok: r.u8()? != 0 },
                other => return Err(decode_err(format!("unknown verify sub-type {other}"))),
            },
            HASH_SEED => Message::HashSeed {
                input_len: r.u64()?,
                output_len: r.u64()?,
                seed: r.bits()?,
            },
            FINAL_KEY_DIGEST => {
                let mut digest = [0u8; 32];
                digest.copy_from_slice(r.take(32)?);
                Message::FinalKeyDigest { digest }
            }
            ABORT => {
                let kind = match r.u8()? {
                    4 => AbortKind::Verification,
                    _ => AbortKind::Protocol,
                };
                let reason = String::from_utf8_lossy(r.rest()).into_owned();
                Message::Abort { kind, reason }
            }
            other => return Err(decode_err(format!("unknown message type 0x{other:02x}"))),
        };
        if r.remaining() != 0 {
            return Err(decode_err(format!("{} trailing bytes", r.remaining())));
        }
        Ok(msg)
    }
}

/// Reads one frame from a byte stream.
pub fn read_frame<R: Read>(input: &mut R) -> Result<Vec<u8>, SessionError> {
    let mut head = [0u8; 5];
    input.read_exact(&mut head)?;
    let len = u32::from_be_bytes([head[0], head[1], head[2], head[3]]);
    if len > MAX_FRAME {
        return Err(decode_err(format!("frame of {len} bytes exceeds limit")));
    }
    let mut frame = Vec::with_capacity(len as usize + 5);
    frame.extend_from_slice(&head);
    frame.resize(len as usize + 5, 0);
    input.read_exact(&mut frame[5..])?;
    Ok(frame)
}

pub fn write_frame<W: Write>(out: &mut W, frame: &[u8]) -> io::Result<()> {
    out.write_all(frame)?;
    out.flush()
}

/// Packs two-bit codes four to a byte, first code in the high bits.
pub fn pack_codes(codes: &[u8]) -> Vec<u8> {
    let mut out = vec![0u8; codes.len().div_ceil(4)];
    for (i, &c) in codes.iter().enumerate() {
        out[i / 4] |= (c & 3) << (6 - 2 * (i % 4));
    }
    out
}

pub fn unpack_codes(packed: &[u8], count: usize) -> Vec<u8> {
    (0..count).map(|i| (packed[i / 4] >> (6 - 2 * (i % 4))) & 3).collect()
}

fn decode_err(msg: impl Into<String>) -> SessionError {
    SessionError::Decode(msg.into())
}

fn basis_byte(b: Basis) -> u8 {
    match b {
        Basis::X => 0,
        Basis::Z => 1,
    }
}

fn put_u32(p: &mut Vec<u8>, v: u32) {
    p.extend_from_slice(&v.to_be_bytes());
}

fn put_u64(p: &mut Vec<u8>, v: u64) {
    p.extend_from_slice(&v.to_be_bytes());
}

fn put_bits(p: &mut Vec<u8>, b: &BitString) {
    put_u64(p, b.len() as u64);
    p.extend_from_slice(&b.to_bytes_msb());
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], SessionError> {
        if self.remaining() < n {
            return Err(decode_err("truncated frame"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn rest(&mut self) -> &'a [u8] {
        let s = &self.buf[self.pos..];
        self.pos = self.buf.len();
        s
    }

    fn u8(&mut self) -> Result<u8, SessionError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, SessionError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, SessionError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn basis(&mut self) -> Result<Basis, SessionError> {
        match self.u8()? {
            0 => Ok(Basis::X),
            1 => Ok(Basis::Z),
            other => Err(decode_err(format!("bad basis byte {other}"))),
        }
    }

    fn bits(&mut self) -> Result<BitString, SessionError> {
        let len = self.u64()? as usize;
        let bytes = self.take(len.div_ceil(8))?;
        BitString::from_bytes_msb(bytes, len).ok_or_else(|| decode_err("truncated bit string"))
    }
}
