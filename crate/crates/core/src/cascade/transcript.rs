//! Audit log of parity disclosures.

use std::fmt;
use std::io::{self, BufRead, Write};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Direction {
    AliceToBob,
    BobToAlice,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AliceToBob => "A->B",
            Direction::BobToAlice => "B->A",
        })
    }
}

/// One transcript line: `direction,pass,sequence,block_id,parity_bits_count`.
///
/// `pass` is the stage the disclosure belongs to (the confirmation stage
/// uses `num_passes`), `sequence` is the ordering id the block was drawn
/// from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub direction: Direction,
    pub pass: u16,
    pub sequence: u32,
    pub block: u32,
    pub parity_bits: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
}

pub const TRANSCRIPT_HEADER: &str = "direction,pass,sequence,block_id,parity_bits_count";

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, e: TranscriptEntry) {
        self.entries.push(e);
    }

    pub fn append(&mut self, other: &mut Transcript) {
        self.entries.append(&mut other.entries);
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Parity bits sent in `direction`.
    pub fn parity_bits(&self, direction: Direction) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.direction == direction)
            .map(|e| e.parity_bits as u64)
            .sum()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{TRANSCRIPT_HEADER}")?;
        for e in &self.entries {
            writeln!(out, "{},{},{},{},{}", e.direction, e.pass, e.sequence, e.block, e.parity_bits)?;
        }
        Ok(())
    }

    /// Re-reads a CSV transcript.
    pub fn read_csv<R: BufRead>(input: R) -> io::Result<Transcript> {
        let bad = |line: usize, what: &str| io::Error::new(io::ErrorKind::InvalidData, format!("transcript line {line}: {what}"));
        let mut t = Transcript::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if i == 0 {
                if line != TRANSCRIPT_HEADER {
                    return Err(bad(1, "unexpected header"));
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(i + 1, "expected 5 fields"));
            }
            let direction = match f[0] {
                "A->B" => Direction::AliceToBob,
                "B->A" => Direction::BobToAlice,
                _ => return Err(bad(i + 1, "bad direction")),
            };
            let num = |s: &str| s.parse::<u64>().map_err(|_| bad(i + 1, "bad number"));
            t.push(TranscriptEntry {
                direction,
                pass: num(f[1])? as u16,
                sequence: num(f[2])? as u32,
                block: num(f[3])? as u32,
                parity_bits: num(f[4])? as u32,
            });
        }
        Ok(t)
    }
}
