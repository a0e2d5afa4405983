use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::tracer::MAX_TTL;

/// Test parameters. Every field has a default, so a config file only
/// needs the values it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    /// MSS advertised by the MSS support test.
    pub mss_support_value: u16,
    /// Largest payload allowed when no MSS was advertised.
    pub mss_missing_limit: u16,
    pub unknown_option_kind: u8,
    /// Payload bytes of the unassigned option.
    #[serde(with = "hex_bytes")]
    pub unknown_option_payload: Vec<u8>,
    /// Reserved bit set by the reserved test (low nibble of byte 12).
    pub reserved_mask: u8,
    pub urgent_len: usize,
    pub urgent_segments: usize,
    pub reply_deadline_ms: u64,
    /// How long the reserved test watches for SYN/ACK retransmissions.
    pub retransmit_window_ms: u64,
    /// Quiet period that ends data collection.
    pub quiesce_ms: u64,
    /// Pause after the first SYN/ACK so answers to the fan copies arrive
    /// before the handshake completes.
    pub settle_ms: u64,
    pub max_ttl: u8,
    /// Send one data byte after a failed reserved ACK stage to tell
    /// deferred accept apart from a retransmitting stack.
    pub defer_accept_probe: bool,
    /// Send TTL-limited copies of each test's first segment.
    pub fan: bool,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            mss_support_value: 515,
            mss_missing_limit: 536,
            unknown_option_kind: 158,
            unknown_option_payload: vec![0xde, 0xad],
            reserved_mask: 0b0100,
            urgent_len: 501,
            urgent_segments: 3,
            reply_deadline_ms: 5000,
            retransmit_window_ms: 10_000,
            quiesce_ms: 1000,
            settle_ms: 200,
            max_ttl: MAX_TTL,
            defer_accept_probe: false,
            fan: true,
        }
    }
}

impl SuiteConfig {
    pub fn reply_deadline(&self) -> Duration {
        Duration::from_millis(self.reply_deadline_ms)
    }

    pub fn retransmit_window(&self) -> Duration {
        Duration::from_millis(self.retransmit_window_ms)
    }

    pub fn quiesce(&self) -> Duration {
        Duration::from_millis(self.quiesce_ms)
    }

    pub fn settle(&self) -> Duration {
        Duration::from_millis(self.settle_ms)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.reserved_mask == 0 || self.reserved_mask > 0x0f {
            return Err(format!("reserved_mask {:#x} must be a nonzero 4-bit value", self.reserved_mask));
        }
        if self.urgent_segments == 0 || self.urgent_len < self.urgent_segments {
            return Err("urgent data must split into at least one nonempty segment".into());
        }
        if self.urgent_len > usize::from(u16::MAX) {
            return Err("urgent data must fit the 16-bit urgent pointer".into());
        }
        if self.max_ttl == 0 || self.max_ttl > MAX_TTL {
            return Err(format!("max_ttl must be within 1..={MAX_TTL}"));
        }
        if self.unknown_option_payload.len() > 38 {
            return Err("unknown option payload exceeds the option space".into());
        }
        if self.mss_support_value == 0 || self.mss_missing_limit == 0 {
            return Err("MSS values must be positive".into());
        }
        Ok(())
    }
}

mod hex_bytes {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        hex::decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let c: SuiteConfig = toml::from_str("mss_support_value = 600\nunknown_option_payload = \"beef\"\n").unwrap();
        assert_eq!(c.mss_support_value, 600);
        assert_eq!(c.unknown_option_payload, vec![0xbe, 0xef]);
        assert_eq!(c.reserved_mask, 0b0100);
        assert!(c.validate().is_ok());
    }

    #[test]
    fn rejects_wide_mask() {
        let c = SuiteConfig { reserved_mask: 0x10, ..SuiteConfig::default() };
        assert!(c.validate().is_err());
    }
}
