use std::time::Duration;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

bitflags! {
    /// Departures from a conformant responder.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Deviations: u16 {
        /// Accepts segments whose checksum is wrong or zero.
        const IGNORE_BAD_CHECKSUM = 1 << 0;
        /// Raises any advertised MSS below 536 to 536.
        const MSS_FLOOR_536 = 1 << 1;
        /// Assumes 1024 bytes when the peer sends no MSS option.
        const DEFAULT_MSS_1024 = 1 << 2;
        /// Stops responding entirely on the first urgent segment.
        const CRASH_ON_URGENT = 1 << 3;
        /// Drops urgent segments without acknowledging them.
        const DROP_URGENT_SILENTLY = 1 << 4;
        /// Resets the connection on urgent data.
        const RST_ON_URGENT = 1 << 5;
        /// Ignores SYNs with any reserved bit set.
        const DROP_RESERVED_SYN = 1 << 6;
        /// Copies the peer's reserved bits into the SYN/ACK.
        const ECHO_RESERVED_BITS = 1 << 7;
        /// Keeps the connection half-open until data arrives, retransmitting
        /// the SYN/ACK in the meantime.
        const DEFER_ACCEPT = 1 << 8;
        /// Ignores SYNs carrying an unassigned option kind.
        const DROP_UNKNOWN_OPTION = 1 << 9;
        /// Answers SYNs that carry an end-of-option-list option with a RST.
        const RST_ON_OPTIONS = 1 << 10;
    }
}

impl Serialize for Deviations {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let names: Vec<&str> = self.iter_names().map(|(name, _)| name).collect();
        names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Deviations {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names.iter().try_fold(Deviations::empty(), |acc, name| {
            Deviations::from_name(name)
                .map(|c| acc | c)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown deviation {name}")))
        })
    }
}

pub const DEFAULT_BODY_LEN: usize = 2000;
pub const DEFAULT_LOCAL_MSS: u16 = 1460;

fn default_body_len() -> usize {
    DEFAULT_BODY_LEN
}

fn default_local_mss() -> u16 {
    DEFAULT_LOCAL_MSS
}

fn default_restart_delay() -> Duration {
    Duration::from_millis(100)
}

/// Behavior of a simulated endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackProfile {
    pub name: String,
    #[serde(default = "Deviations::empty")]
    pub deviations: Deviations,
    /// Bytes served in answer to a request.
    #[serde(default = "default_body_len")]
    pub response_body_len: usize,
    #[serde(default)]
    pub restart_after_crash: bool,
    #[serde(default = "default_restart_delay", with = "millis")]
    pub restart_delay: Duration,
    /// MSS the endpoint advertises and never exceeds.
    #[serde(default = "default_local_mss")]
    pub local_mss: u16,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

impl StackProfile {
    pub fn conformant(name: &str) -> StackProfile {
        StackProfile {
            name: name.to_owned(),
            deviations: Deviations::empty(),
            response_body_len: DEFAULT_BODY_LEN,
            restart_after_crash: false,
            restart_delay: default_restart_delay(),
            local_mss: DEFAULT_LOCAL_MSS,
        }
    }

    pub fn with_deviations(mut self, deviations: Deviations) -> StackProfile {
        self.deviations = deviations;
        self
    }

    pub fn has(&self, d: Deviations) -> bool {
        self.deviations.contains(d)
    }

    /// Profiles modeled on the six tested stacks.
    pub fn named(name: &str) -> Option<StackProfile> {
        let deviations = match name {
            "linux" | "lwip" => Deviations::empty(),
            "windows" => Deviations::MSS_FLOOR_536,
            "macos" => Deviations::DEFAULT_MSS_1024,
            "uip" => Deviations::CRASH_ON_URGENT,
            "seastar" => Deviations::IGNORE_BAD_CHECKSUM,
            _ => return None,
        };
        Some(StackProfile::conformant(name).with_deviations(deviations))
    }

    pub const NAMES: [&'static str; 6] = ["linux", "windows", "macos", "uip", "lwip", "seastar"];

    /// MSS used when sending to a peer that advertised `advertised`.
    pub fn effective_mss(&self, advertised: Option<u16>) -> u16 {
        let mut peer = match advertised {
            Some(v) => v,
            None if self.has(Deviations::DEFAULT_MSS_1024) => 1024,
            None => 536,
        };
        if self.has(Deviations::MSS_FLOOR_536) {
            peer = peer.max(536);
        }
        peer.min(self.local_mss).max(1)
    }
}
