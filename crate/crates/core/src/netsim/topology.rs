use std::collections::{BTreeMap, HashSet};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::middlebox::{MiddleboxSpec, QuoteLen};
use super::profile::StackProfile;

/// Address the simulated scanner sends from.
pub const CLIENT_ADDR: Ipv4Addr = Ipv4Addr::new(198, 51, 100, 1);
pub const DEFAULT_HOPS: u8 = 10;
pub const DEFAULT_HOP_LATENCY_US: u64 = 1000;

#[derive(Debug, Error)]
pub enum TopologyError {
    #[error("invalid topology: {0}")]
    InvalidSpec(String),
    #[error("cannot read topology {path}: {source}")]
    Unreadable { path: String, source: std::io::Error },
    #[error("cannot parse topology: {0}")]
    Parse(#[from] toml::de::Error),
}

/// A stack profile given by name or spelled out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ProfileRef {
    Named(String),
    Custom(StackProfile),
}

impl ProfileRef {
    pub fn resolve(&self) -> Option<StackProfile> {
        match self {
            ProfileRef::Named(n) => StackProfile::named(n),
            ProfileRef::Custom(p) => Some(p.clone()),
        }
    }
}

impl From<StackProfile> for ProfileRef {
    fn from(p: StackProfile) -> Self {
        ProfileRef::Custom(p)
    }
}

fn default_ports() -> Vec<u16> {
    vec![80]
}

fn default_hops() -> u8 {
    DEFAULT_HOPS
}

fn default_latency() -> u64 {
    DEFAULT_HOP_LATENCY_US
}

/// One simulated server and the router path leading to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub addr: Ipv4Addr,
    #[serde(default = "default_ports")]
    pub ports: Vec<u16>,
    pub profile: ProfileRef,
    /// Routers between scanner and host; the host itself is one further.
    #[serde(default = "default_hops")]
    pub hops: u8,
    #[serde(default)]
    pub middleboxes: Vec<MiddleboxSpec>,
    /// Quote length of plain routers.
    #[serde(default)]
    pub quote_len: QuoteLen,
    /// Swallows everything that reaches the host.
    #[serde(default)]
    pub blackhole: bool,
    #[serde(default)]
    pub labels: BTreeMap<String, String>,
}

impl HostSpec {
    pub fn new(addr: Ipv4Addr, profile: impl Into<ProfileRef>) -> HostSpec {
        HostSpec {
            addr,
            ports: default_ports(),
            profile: profile.into(),
            hops: DEFAULT_HOPS,
            middleboxes: Vec::new(),
            quote_len: QuoteLen::Full,
            blackhole: false,
            labels: BTreeMap::new(),
        }
    }

    pub fn named(addr: Ipv4Addr, profile: &str) -> HostSpec {
        HostSpec::new(addr, ProfileRef::Named(profile.to_owned()))
    }

    pub fn with_middlebox(mut self, m: MiddleboxSpec) -> HostSpec {
        self.middleboxes.push(m);
        self
    }

    pub fn with_hops(mut self, hops: u8) -> HostSpec {
        self.hops = hops;
        self
    }

    pub fn with_label(mut self, key: &str, value: &str) -> HostSpec {
        self.labels.insert(key.to_owned(), value.to_owned());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    #[serde(default)]
    pub seed: u64,
    /// One-way delay per link, in microseconds.
    #[serde(default = "default_latency")]
    pub hop_latency_us: u64,
    #[serde(default)]
    pub hosts: Vec<HostSpec>,
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec { seed: 0, hop_latency_us: DEFAULT_HOP_LATENCY_US, hosts: Vec::new() }
    }
}

impl TopologySpec {
    pub fn single(host: HostSpec, seed: u64) -> TopologySpec {
        TopologySpec { seed, hosts: vec![host], ..TopologySpec::default() }
    }

    pub fn from_toml(text: &str) -> Result<TopologySpec, TopologyError> {
        let spec: TopologySpec = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<TopologySpec, TopologyError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| TopologyError::Unreadable { path: path.display().to_string(), source })?;
        TopologySpec::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), TopologyError> {
        let invalid = |m: String| Err(TopologyError::InvalidSpec(m));
        let mut seen = HashSet::new();
        for h in &self.hosts {
            if !seen.insert(h.addr) {
                return invalid(format!("host {} listed twice", h.addr));
            }
            if h.addr == CLIENT_ADDR {
                return invalid(format!("host {} collides with the scanner address", h.addr));
            }
            if h.ports.is_empty() {
                return invalid(format!("host {} listens on no port", h.addr));
            }
            if h.hops >= 64 {
                return invalid(format!("host {}: {} hops exceed the initial TTL", h.addr, h.hops));
            }
            if h.profile.resolve().is_none() {
                return invalid(format!("host {}: unknown profile {:?}", h.addr, h.profile));
            }
            let mut hops = HashSet::new();
            for m in &h.middleboxes {
                if m.hop == 0 || m.hop > h.hops {
                    return invalid(format!("host {}: middlebox hop {} outside 1..={}", h.addr, m.hop, h.hops));
                }
                if !hops.insert(m.hop) {
                    return invalid(format!("host {}: two middleboxes at hop {}", h.addr, m.hop));
                }
            }
        }
        Ok(())
    }
}
