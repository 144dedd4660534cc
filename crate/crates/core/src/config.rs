//! Run configuration: a sectioned TOML document.
//!
//! Required keys: `source.p_bx`, `source.p_bz`, `alice.q`, `bob.q`,
//! `session.rounds`. Everything else has a default, listed on the fields
//! below. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cascade::CascadeConfig;
use crate::keyrate::OptimizeInput;
use crate::session::{SessionConfig, TransportKind};
use crate::source::{SourceModel, StationModel};

pub const REQUIRED_KEYS: [&str; 5] = ["source.p_bx", "source.p_bz", "alice.q", "bob.q", "session.rounds"];

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("missing required key(s): {}", .0.join(", "))]
    Missing(Vec<String>),
    #[error("{0}")]
    Parse(String),
    #[error("{key} = {value} is out of range, expected {expected}")]
    Range { key: String, value: f64, expected: &'static str },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub source: SourceSection,
    pub alice: StationSection,
    pub bob: StationSection,
    #[serde(default)]
    pub cascade: CascadeConfig,
    pub session: SessionSection,
    #[serde(default)]
    pub optimize: OptimizeSection,
    #[serde(default)]
    pub transport: TransportSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    pub p_bx: f64,
    pub p_bz: f64,
    /// Default 11000.
    #[serde(default = "default_pair_rate")]
    pub pair_rate: f64,
    /// Default 0.
    #[serde(default)]
    pub accidental_prob: f64,
    /// Default 0.
    #[serde(default)]
    pub double_click_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StationSection {
    pub q: f64,
    /// Default 1.
    #[serde(default = "one")]
    pub pre_attenuation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionSection {
    pub rounds: u64,
    /// Default 1.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Default: derived from `seed`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol_seed: Option<u64>,
    /// Default 1e-6.
    #[serde(default = "default_p_eps")]
    pub p_eps: f64,
    /// Default 1208.
    #[serde(default = "default_chunk_x")]
    pub chunk_x: usize,
    /// Default 927.
    #[serde(default = "default_chunk_z")]
    pub chunk_z: usize,
    /// Default 40.
    #[serde(default = "default_tag_len")]
    pub tag_len: usize,
    /// Default 65536.
    #[serde(default = "default_sift_batch")]
    pub sift_batch: usize,
    /// Rounds per QBER window. Default 10000.
    #[serde(default = "default_qber_window")]
    pub qber_window: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizeSection {
    /// Default 1.31.
    pub f_x: f64,
    /// Default 1.59.
    pub f_z: f64,
    /// Raw rounds assumed by the optimizer. Default: `session.rounds`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_total: Option<f64>,
    /// Also search independent biases. Default false.
    pub asymmetric: bool,
    /// Step of the `(q_a, q_b)` grid output. Default 0.01.
    pub grid_step: f64,
}

impl Default for OptimizeSection {
    fn default() -> Self {
        Self {
            f_x: 1.31,
            f_z: 1.59,
            n_total: None,
            asymmetric: false,
            grid_step: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransportSection {
    /// `channel` (default) or `tcp`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<TransportKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub listen: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub connect: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    /// Default `out`.
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: "out".into() }
    }
}

fn default_pair_rate() -> f64 {
    11_000.0
}
fn one() -> f64 {
    1.0
}
fn default_seed() -> u64 {
    1
}
fn default_p_eps() -> f64 {
    1e-6
}
fn default_chunk_x() -> usize {
    1208
}
fn default_chunk_z() -> usize {
    927
}
fn default_tag_len() -> usize {
    40
}
fn default_sift_batch() -> usize {
    1 << 16
}
fn default_qber_window() -> u64 {
    10_000
}

fn range(key: &str, value: f64, ok: bool, expected: &'static str) -> Result<(), ConfigError> {
    if ok {
        Ok(())
    } else {
        Err(ConfigError::Range {
            key: key.to_string(),
            value,
            expected,
        })
    }
}

fn unit(key: &str, v: f64) -> Result<(), ConfigError> {
    range(key, v, (0.0..=1.0).contains(&v), "[0, 1]")
}

impl RunConfig {
    /// Parses and validates a document.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let doc: toml::Table = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        let missing: Vec<String> = REQUIRED_KEYS
            .iter()
            .filter(|k| {
                let (section, key) = k.split_once('.').unwrap();
                doc.get(section).and_then(|s| s.get(key)).is_none()
            })
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(ConfigError::Missing(missing));
        }
        let cfg: RunConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        unit("source.p_bx", self.source.p_bx)?;
        unit("source.p_bz", self.source.p_bz)?;
        range("source.pair_rate", self.source.pair_rate, self.source.pair_rate >= 0.0, "[0, inf)")?;
        unit("source.accidental_prob", self.source.accidental_prob)?;
        unit("source.double_click_prob", self.source.double_click_prob)?;
        for (name, st) in [("alice", &self.alice), ("bob", &self.bob)] {
            unit(&format!("{name}.q"), st.q)?;
            let pa = st.pre_attenuation;
            range(&format!("{name}.pre_attenuation"), pa, pa > 0.0 && pa <= 1.0, "(0, 1]")?;
        }
        let c = &self.cascade;
        range("cascade.s", c.s as f64, c.s >= 1, "[1, inf)")?;
        range("cascade.block_constant", c.block_constant, c.block_constant > 0.0, "(0, inf)")?;
        range("cascade.prior_qber", c.prior_qber, (0.0..=0.5).contains(&c.prior_qber), "[0, 0.5]")?;
        let s = &self.session;
        range("session.rounds", s.rounds as f64, s.rounds > 0, "[1, inf)")?;
        range("session.p_eps", s.p_eps, s.p_eps > 0.0 && s.p_eps < 1.0, "(0, 1)")?;
        range("session.chunk_x", s.chunk_x as f64, s.chunk_x > 0, "[1, inf)")?;
        range("session.chunk_z", s.chunk_z as f64, s.chunk_z > 0, "[1, inf)")?;
        range("session.tag_len", s.tag_len as f64, s.tag_len > 0, "[1, inf)")?;
        range("session.sift_batch", s.sift_batch as f64, s.sift_batch > 0 && s.sift_batch <= u32::MAX as usize, "[1, 2^32)")?;
        range("session.qber_window", s.qber_window as f64, s.qber_window >= 100, "[100, inf)")?;
        let o = &self.optimize;
        range("optimize.f_x", o.f_x, o.f_x >= 1.0, "[1, inf)")?;
        range("optimize.f_z", o.f_z, o.f_z >= 1.0, "[1, inf)")?;
        if let Some(n) = o.n_total {
            range("optimize.n_total", n, n > 0.0, "(0, inf)")?;
        }
        range("optimize.grid_step", o.grid_step, o.grid_step > 0.0 && o.grid_step <= 0.5, "(0, 0.5]")?;
        Ok(())
    }

    /// Canonical serialization; reparses to an equal config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical serialization, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn session(&self) -> SessionConfig {
        let s = &self.session;
        SessionConfig {
            source: SourceModel {
                p_bx: self.source.p_bx,
                p_bz: self.source.p_bz,
                pair_rate: self.source.pair_rate,
                accidental_prob: self.source.accidental_prob,
                double_click_prob: self.source.double_click_prob,
            },
            alice: StationModel {
                q: self.alice.q,
                pre_attenuation: self.alice.pre_attenuation,
            },
            bob: StationModel {
                q: self.bob.q,
                pre_attenuation: self.bob.pre_attenuation,
            },
            cascade: self.cascade,
            p_eps: s.p_eps,
            n_rounds: s.rounds,
            seed: s.seed,
            protocol_seed: s.protocol_seed,
            chunk_x: s.chunk_x,
            chunk_z: s.chunk_z,
            tag_len: s.tag_len,
            sift_batch: s.sift_batch,
            config_digest: self.digest(),
        }
    }

    /// Optimizer inputs: the configured channel error rates and
    /// efficiencies.
    pub fn optimize_input(&self) -> OptimizeInput {
        OptimizeInput {
            n_total: self.optimize.n_total.unwrap_or(self.session.rounds as f64),
            e_bx: self.source.p_bx,
            e_bz: self.source.p_bz,
            f_x: self.optimize.f_x,
            f_z: self.optimize.f_z,
            p_eps: self.session.p_eps,
        }
    }
}

pub fn load_config(path: impl AsRef<Path>) -> Result<RunConfig, ConfigError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.display().to_string(),
        source,
    })?;
    RunConfig::parse(&text)
}
