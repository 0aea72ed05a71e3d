//! Scenario configuration: built-in defaults, overridden by a flat
//! `key = value` file, overridden in turn by command-line flags. Both layers go
//! through [`ScenarioConfig::set`], so a key means the same thing everywhere.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Duration;

use thiserror::Error;

use crate::netsim::LockModel;
use crate::rxpath::SackMode;
use crate::txpath::CopyMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Scenario {
    Bulk12k,
    Small128b,
    Multistream,
    Scaling,
    LossSweep,
    Failover,
}

impl Scenario {
    pub const ALL: [Scenario; 6] = [
        Scenario::Bulk12k,
        Scenario::Small128b,
        Scenario::Multistream,
        Scenario::Scaling,
        Scenario::LossSweep,
        Scenario::Failover,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Bulk12k => "bulk_12k",
            Scenario::Small128b => "small_128b",
            Scenario::Multistream => "multistream",
            Scenario::Scaling => "scaling",
            Scenario::LossSweep => "loss_sweep",
            Scenario::Failover => "failover",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Tcp,
    Sctp,
}

impl FromStr for Protocol {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tcp" => Ok(Protocol::Tcp),
            "sctp" => Ok(Protocol::Sctp),
            _ => Err(format!("unknown protocol `{s}` (tcp|sctp)")),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Protocol::Tcp => "tcp",
            Protocol::Sctp => "sctp",
        })
    }
}

/// Transport variant compared in loss sweeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Mode {
    Tcp,
    SctpSack,
    SctpGbn,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Tcp => "tcp",
            Mode::SctpSack => "sctp_sack",
            Mode::SctpGbn => "sctp_gbn",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "tcp" => Ok(Mode::Tcp),
            "sctp_sack" => Ok(Mode::SctpSack),
            "sctp_gbn" => Ok(Mode::SctpGbn),
            _ => Err(format!("unknown mode `{s}` (tcp|sctp_sack|sctp_gbn)")),
        }
    }
}

/// Parses `per-packet`, `lk-double`, `per-k:<k>` or `delayed:<ms>`.
pub fn parse_sack_policy(s: &str) -> Result<SackMode, String> {
    match s {
        "per-packet" => return Ok(SackMode::EveryPacket),
        "lk-double" => return Ok(SackMode::LkDouble),
        _ => {}
    }
    if let Some(k) = s.strip_prefix("per-k:") {
        let k: u32 = k.parse().map_err(|_| format!("bad k in `{s}`"))?;
        if k == 0 {
            return Err("per-k needs k >= 1".into());
        }
        return Ok(SackMode::EveryK(k));
    }
    if let Some(ms) = s.strip_prefix("delayed:") {
        let ms: f64 = ms.parse().map_err(|_| format!("bad delay in `{s}`"))?;
        if !(ms.is_finite() && ms > 0.0) {
            return Err("delayed:<ms> needs a positive delay".into());
        }
        return Ok(SackMode::Delayed(Duration::from_nanos(
            (ms * 1e6).round() as u64
        )));
    }
    Err(format!(
        "unknown sack policy `{s}` (per-packet|lk-double|per-k:<k>|delayed:<ms>)"
    ))
}

pub fn sack_policy_name(m: SackMode) -> String {
    match m {
        SackMode::EveryPacket => "per-packet".into(),
        SackMode::LkDouble => "lk-double".into(),
        SackMode::EveryK(k) => format!("per-k:{k}"),
        SackMode::Delayed(d) => format!("delayed:{}", d.as_secs_f64() * 1e3),
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid value for `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// Every benchmark input. Fields left `None` take a per-scenario default.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub protocol: Protocol,
    pub sack_policy: SackMode,
    pub gbn: bool,
    pub no_delay: Option<bool>,
    pub copy_mode: CopyMode,
    pub mbs: usize,
    pub checksum: bool,
    pub lock_model: LockModel,
    /// Bits per second.
    pub bandwidth: u64,
    pub rtt_us: u64,
    pub drop_prob: f64,
    pub drop_list: Vec<f64>,
    pub queue_capacity: usize,
    pub message_size: Option<usize>,
    pub rwnd: usize,
    pub streams: Option<u16>,
    pub assocs: Option<usize>,
    pub seed: u64,
    pub seeds: usize,
    pub modes: Vec<Mode>,
    pub bytes: Option<u64>,
    /// Simulated-time cap.
    pub duration_ms: u64,
    pub max_events: u64,
    pub paths: Option<usize>,
    pub kill_at_ms: u64,
    pub revive_at_ms: Option<u64>,
    pub hb_interval_ms: u64,
    /// Host processing budget in cost units per simulated second.
    pub cpu_budget: Option<f64>,
}

pub const DEFAULT_DROP_LIST: [f64; 6] = [0.0, 0.005, 0.01, 0.025, 0.05, 0.1];

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scenario: Scenario::Bulk12k,
            protocol: Protocol::Sctp,
            sack_policy: SackMode::EveryK(7),
            gbn: false,
            no_delay: None,
            copy_mode: CopyMode::Optimized,
            mbs: 4,
            checksum: false,
            lock_model: LockModel::Coarse,
            bandwidth: 1_000_000_000,
            rtt_us: 102,
            drop_prob: 0.0,
            drop_list: DEFAULT_DROP_LIST.to_vec(),
            queue_capacity: 256,
            message_size: None,
            rwnd: 128 * 1024,
            streams: None,
            assocs: None,
            seed: 7,
            seeds: 5,
            modes: vec![Mode::Tcp, Mode::SctpSack, Mode::SctpGbn],
            bytes: None,
            duration_ms: 120_000,
            max_events: 200_000_000,
            paths: None,
            kill_at_ms: 50,
            revive_at_ms: Some(200),
            hb_interval_ms: 500,
            cpu_budget: None,
        }
    }
}

fn parse_bool(field: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid(field, format!("expected a boolean, got `{v}`"))),
    }
}

fn parse_num<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError> {
    v.parse()
        .map_err(|_| invalid(field, format!("expected a number, got `{v}`")))
}

/// Accepts plain integers and `k`/`m`/`g` (binary for sizes) suffixes.
fn parse_size(field: &str, v: &str) -> Result<u64, ConfigError> {
    let lower = v.to_ascii_lowercase();
    let (digits, mult) = match lower.chars().last() {
        Some('k') => (&lower[..lower.len() - 1], 1u64 << 10),
        Some('m') => (&lower[..lower.len() - 1], 1 << 20),
        Some('g') => (&lower[..lower.len() - 1], 1 << 30),
        _ => (lower.as_str(), 1),
    };
    let n: u64 = parse_num(field, digits)?;
    n.checked_mul(mult)
        .ok_or_else(|| invalid(field, "overflow"))
}

/// Like [`parse_size`] but with decimal multipliers, for bit rates.
fn parse_rate(field: &str, v: &str) -> Result<u64, ConfigError> {
    let lower = v.to_ascii_lowercase();
    let (digits, mult) = match lower.chars().last() {
        Some('k') => (&lower[..lower.len() - 1], 1_000u64),
        Some('m') => (&lower[..lower.len() - 1], 1_000_000),
        Some('g') => (&lower[..lower.len() - 1], 1_000_000_000),
        _ => (lower.as_str(), 1),
    };
    let n: f64 = parse_num(field, digits)?;
    Ok((n * mult as f64).round() as u64)
}

fn parse_prob(field: &str, v: &str) -> Result<f64, ConfigError> {
    let p: f64 = parse_num(field, v)?;
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(field, format!("{p} is outside [0, 1]")));
    }
    Ok(p)
}

impl ScenarioConfig {
    pub fn for_scenario(scenario: Scenario) -> Self {
        ScenarioConfig {
            scenario,
            ..Default::default()
        }
    }

    pub const KEYS: [&'static str; 29] = [
        "scenario",
        "protocol",
        "sack_policy",
        "gbn",
        "no_delay",
        "copy_mode",
        "mbs",
        "checksum",
        "lock_model",
        "bandwidth",
        "rtt_us",
        "drop",
        "drop_list",
        "queue_capacity",
        "message_size",
        "rwnd",
        "streams",
        "assocs",
        "seed",
        "seeds",
        "modes",
        "bytes",
        "duration_ms",
        "max_events",
        "paths",
        "kill_at_ms",
        "revive_at_ms",
        "hb_interval_ms",
        "cpu_budget",
    ];

    /// Sets one field from its textual form. Dashes in `key` are read as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "scenario" => self.scenario = v.parse().map_err(|e| invalid(k, e))?,
            "protocol" => self.protocol = v.parse().map_err(|e| invalid(k, e))?,
            "sack_policy" => self.sack_policy = parse_sack_policy(v).map_err(|e| invalid(k, e))?,
            "gbn" => self.gbn = parse_bool(k, v)?,
            "no_delay" => self.no_delay = Some(parse_bool(k, v)?),
            "copy_mode" => {
                self.copy_mode = match v {
                    "legacy" => CopyMode::Legacy,
                    "optimized" => CopyMode::Optimized,
                    _ => return Err(invalid(k, format!("`{v}` (legacy|optimized)"))),
                }
            }
            "mbs" => self.mbs = parse_num(k, v)?,
            "checksum" => self.checksum = parse_bool(k, v)?,
            "lock_model" => {
                self.lock_model = match v {
                    "coarse" => LockModel::Coarse,
                    "fine" => LockModel::Fine,
                    _ => return Err(invalid(k, format!("`{v}` (coarse|fine)"))),
                }
            }
            "bandwidth" => self.bandwidth = parse_rate(k, v)?,
            "rtt_us" => self.rtt_us = parse_num(k, v)?,
            "drop" => self.drop_prob = parse_prob(k, v)?,
            "drop_list" => {
                self.drop_list = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_prob(k, s))
                    .collect::<Result<_, _>>()?
            }
            "queue_capacity" => self.queue_capacity = parse_num(k, v)?,
            "message_size" => self.message_size = Some(parse_size(k, v)? as usize),
            "rwnd" => self.rwnd = parse_size(k, v)? as usize,
            "streams" => self.streams = Some(parse_num(k, v)?),
            "assocs" => self.assocs = Some(parse_num(k, v)?),
            "seed" => self.seed = parse_num(k, v)?,
            "seeds" => self.seeds = parse_num(k, v)?,
            "modes" => {
                self.modes = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| s.parse().map_err(|e| invalid(k, e)))
                    .collect::<Result<_, _>>()?
            }
            "bytes" => self.bytes = Some(parse_size(k, v)?),
            "duration_ms" => self.duration_ms = parse_num(k, v)?,
            "max_events" => self.max_events = parse_num(k, v)?,
            "paths" => self.paths = Some(parse_num(k, v)?),
            "kill_at_ms" => self.kill_at_ms = parse_num(k, v)?,
            "revive_at_ms" => {
                self.revive_at_ms = match v {
                    "none" | "never" => None,
                    _ => Some(parse_num(k, v)?),
                }
            }
            "hb_interval_ms" => self.hb_interval_ms = parse_num(k, v)?,
            "cpu_budget" => {
                self.cpu_budget = match v {
                    "none" | "off" => None,
                    _ => Some(parse_num(k, v)?),
                }
            }
            _ => return Err(ConfigError::UnknownKey(key)),
        }
        Ok(())
    }

    /// Applies a flat `key = value` text; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                msg: format!("expected key = value, got `{line}`"),
            })?;
            self.set(k, v).map_err(|e| ConfigError::Syntax {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        self.apply_str(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.bandwidth == 0 {
            return Err(invalid("bandwidth", "must be positive"));
        }
        if self.rtt_us == 0 {
            return Err(invalid("rtt_us", "must be positive"));
        }
        if self.mbs == 0 {
            return Err(invalid("mbs", "must be at least 1"));
        }
        if self.queue_capacity == 0 {
            return Err(invalid("queue_capacity", "must be at least 1"));
        }
        if self.message_size() == 0 {
            return Err(invalid("message_size", "must be positive"));
        }
        if self.rwnd < 1500 {
            return Err(invalid("rwnd", "must hold at least one MTU"));
        }
        if self.streams() == 0 {
            return Err(invalid("streams", "must be at least 1"));
        }
        if self.assocs() == 0 {
            return Err(invalid("assocs", "must be at least 1"));
        }
        if self.byte_target() == 0 {
            return Err(invalid("bytes", "must be positive"));
        }
        if self.seeds == 0 {
            return Err(invalid("seeds", "must be at least 1"));
        }
        if self.duration_ms == 0 {
            return Err(invalid("duration_ms", "must be positive"));
        }
        if self.scenario == Scenario::LossSweep
            && self.drop_list.is_empty()
            && self.modes.is_empty()
        {
            return Err(invalid("modes", "sweep needs at least one mode"));
        }
        if self.scenario == Scenario::Failover {
            if self.paths() < 2 {
                return Err(invalid("paths", "failover needs at least 2 paths"));
            }
            if self.revive_at_ms.is_some_and(|r| r <= self.kill_at_ms) {
                return Err(invalid("revive_at_ms", "must come after kill_at_ms"));
            }
        }
        if self.cpu_budget.is_some_and(|b| !(b.is_finite() && b > 0.0)) {
            return Err(invalid("cpu_budget", "must be positive"));
        }
        if self.hb_interval_ms == 0 {
            return Err(invalid("hb_interval_ms", "must be positive"));
        }
        Ok(())
    }

    pub fn message_size(&self) -> usize {
        self.message_size.unwrap_or(match self.scenario {
            Scenario::Small128b => 128,
            Scenario::Multistream => 2560,
            _ => 12 * 1024,
        })
    }

    pub fn byte_target(&self) -> u64 {
        self.bytes.unwrap_or(match self.scenario {
            Scenario::Bulk12k => 64 << 20,
            Scenario::Small128b => 1 << 20,
            Scenario::Multistream => 8 << 20,
            Scenario::Scaling => 16 << 20,
            Scenario::LossSweep => 16 << 20,
            // 1500 messages paced at one per millisecond
            Scenario::Failover => 1500 * 12 * 1024,
        })
    }

    pub fn no_delay(&self) -> bool {
        self.no_delay.unwrap_or(matches!(
            self.scenario,
            Scenario::Small128b | Scenario::Multistream
        ))
    }

    pub fn streams(&self) -> u16 {
        self.streams.unwrap_or(match self.scenario {
            Scenario::Multistream => 2,
            _ => 1,
        })
    }

    pub fn assocs(&self) -> usize {
        self.assocs.unwrap_or(match self.scenario {
            Scenario::Multistream | Scenario::Scaling => 4,
            _ => 1,
        })
    }

    pub fn paths(&self) -> usize {
        self.paths.unwrap_or(match self.scenario {
            Scenario::Failover => 2,
            _ => 1,
        })
    }

    pub fn cpu_budget(&self) -> Option<f64> {
        match self.scenario {
            Scenario::Scaling => Some(self.cpu_budget.unwrap_or(4.0e8)),
            _ => self.cpu_budget,
        }
    }

    pub fn one_way(&self) -> Duration {
        Duration::from_nanos(self.rtt_us * 1000 / 2)
    }

    pub fn hb_interval(&self) -> Duration {
        Duration::from_millis(self.hb_interval_ms)
    }

    pub fn mode(&self) -> Mode {
        match (self.protocol, self.gbn) {
            (Protocol::Tcp, _) => Mode::Tcp,
            (Protocol::Sctp, false) => Mode::SctpSack,
            (Protocol::Sctp, true) => Mode::SctpGbn,
        }
    }

    pub fn with_mode(&self, mode: Mode) -> Self {
        let mut c = self.clone();
        match mode {
            Mode::Tcp => c.protocol = Protocol::Tcp,
            Mode::SctpSack => {
                c.protocol = Protocol::Sctp;
                c.gbn = false;
            }
            Mode::SctpGbn => {
                c.protocol = Protocol::Sctp;
                c.gbn = true;
            }
        }
        c
    }
}
