//! Encoder settings and the flat `key=value` file that carries them.

use std::fmt;
use std::ops::Range;

use thiserror::Error;

use crate::instruction::RetirementBlock;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ResyncMode {
    PacketCount,
    CycleCount,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub enabled: bool,
    pub lanes: u32,
    /// Bit `p` set allows privilege level `p`.
    pub priv_allow: u8,
    /// Half-open address filters; empty allows everything.
    pub addr_ranges: Vec<Range<u64>>,
    pub resync_mode: ResyncMode,
    pub resync_threshold: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lanes: 1,
            priv_allow: 0b1111,
            addr_ranges: Vec::new(),
            resync_mode: ResyncMode::PacketCount,
            resync_threshold: 1000,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {0}: expected key=value")]
    MalformedLine(usize),
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: {value}")]
    BadValue { key: String, value: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lanes == 0 {
            return Err(ConfigError::Invalid("lanes must be at least 1".into()));
        }
        if self.resync_threshold == 0 {
            return Err(ConfigError::Invalid("resync_threshold must be at least 1".into()));
        }
        if self.priv_allow > 0b1111 {
            return Err(ConfigError::Invalid("privilege levels are 0..=3".into()));
        }
        for r in &self.addr_ranges {
            if r.start >= r.end || r.start & 1 != 0 || r.end & 1 != 0 {
                return Err(ConfigError::Invalid(format!(
                    "range {:#x}-{:#x} must be non-empty and halfword aligned",
                    r.start, r.end
                )));
            }
        }
        Ok(())
    }

    pub fn allows_priv(&self, privilege: u8) -> bool {
        privilege < 4 && self.priv_allow >> privilege & 1 == 1
    }

    /// Applies one `key=value` setting. Used by both the file parser and CLI
    /// overrides.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = || ConfigError::BadValue {
            key: key.into(),
            value: value.into(),
        };
        match key {
            "enabled" => self.enabled = parse_bool(value).ok_or_else(bad)?,
            "lanes" => self.lanes = value.parse().map_err(|_| bad())?,
            "priv_allow" => {
                let mut mask = 0u8;
                for p in value.split(',').map(str::trim).filter(|p| !p.is_empty()) {
                    let level: u8 = p.parse().map_err(|_| bad())?;
                    if level > 3 {
                        return Err(bad());
                    }
                    mask |= 1 << level;
                }
                self.priv_allow = mask;
            }
            "addr_ranges" => {
                let mut ranges = Vec::new();
                for r in value.split(',').map(str::trim).filter(|r| !r.is_empty()) {
                    let (lo, hi) = r.split_once('-').ok_or_else(bad)?;
                    ranges.push(parse_addr(lo).ok_or_else(bad)?..parse_addr(hi).ok_or_else(bad)?);
                }
                self.addr_ranges = ranges;
            }
            "resync_mode" => {
                self.resync_mode = match value {
                    "packets" => ResyncMode::PacketCount,
                    "cycles" => ResyncMode::CycleCount,
                    _ => return Err(bad()),
                }
            }
            "resync_threshold" => self.resync_threshold = value.parse().map_err(|_| bad())?,
            _ => return Err(ConfigError::UnknownKey(key.into())),
        }
        Ok(())
    }

    /// Parses a config file; keys not present keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::MalformedLine(i + 1))?;
            config.set(k.trim(), v.trim())?;
        }
        config.validate()?;
        Ok(config)
    }
}

impl fmt::Display for EncoderConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "enabled={}", self.enabled)?;
        writeln!(f, "lanes={}", self.lanes)?;
        let privs: Vec<String> = (0..4)
            .filter(|p| self.allows_priv(*p))
            .map(|p| p.to_string())
            .collect();
        writeln!(f, "priv_allow={}", privs.join(","))?;
        let ranges: Vec<String> = self
            .addr_ranges
            .iter()
            .map(|r| format!("{:#x}-{:#x}", r.start, r.end))
            .collect();
        writeln!(f, "addr_ranges={}", ranges.join(","))?;
        let mode = match self.resync_mode {
            ResyncMode::PacketCount => "packets",
            ResyncMode::CycleCount => "cycles",
        };
        writeln!(f, "resync_mode={mode}")?;
        writeln!(f, "resync_threshold={}", self.resync_threshold)
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "1" | "true" | "yes" => Some(true),
        "0" | "false" | "no" => Some(false),
        _ => None,
    }
}

fn parse_addr(v: &str) -> Option<u64> {
    let v = v.trim();
    match v.strip_prefix("0x") {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => v.parse().ok(),
    }
}

/// Whether `block` is traced under `config`.
pub fn qualify(block: &RetirementBlock, config: &EncoderConfig) -> bool {
    config.enabled
        && config.allows_priv(block.privilege)
        && (config.addr_ranges.is_empty()
            || config.addr_ranges.iter().any(|r| r.contains(&block.iaddr)))
}
