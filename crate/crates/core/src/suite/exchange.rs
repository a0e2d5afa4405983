use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::TestId;
use crate::segment::{Segment, TcpFlags};
use crate::tracer::{Carriers, Fan, PathObservation};
use crate::transport::Endpoint;

/// Part of a test a frame belongs to. Each stage runs on its own 4-tuple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Liveness,
    Primary,
    Secondary,
    PostLiveness,
    /// Probe on the primary 4-tuple after the post-test liveness check.
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Sent,
    Received,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Packet {
    Tcp {
        segment: Segment,
        /// Set on TTL-limited fan copies.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        fan: bool,
    },
    /// ICMP message bytes (from the ICMP header on) and the sending router.
    Icmp { source: Ipv4Addr, bytes: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub at_us: u64,
    pub stage: Stage,
    pub direction: Direction,
    #[serde(flatten)]
    pub packet: Packet,
}

impl Frame {
    pub fn segment(&self) -> Option<&Segment> {
        match &self.packet {
            Packet::Tcp { segment, fan: false } => Some(segment),
            _ => None,
        }
    }
}

/// Enough to rebuild the fan that was sent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FanRecord {
    pub stage: Stage,
    pub base: Segment,
    pub carriers: Carriers,
    pub max_ttl: u8,
}

impl FanRecord {
    pub fn rebuild(&self) -> Fan {
        Fan::new(&self.base, self.max_ttl, self.carriers)
    }
}

/// Everything one test sent and received, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeExchange {
    pub test: TestId,
    pub target: Endpoint,
    /// Payload bound the MSS tests check against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mss_limit: Option<u16>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fan: Option<FanRecord>,
    pub frames: Vec<Frame>,
}

impl ProbeExchange {
    pub fn new(test: TestId, target: Endpoint) -> ProbeExchange {
        ProbeExchange { test, target, mss_limit: None, fan: None, frames: Vec::new() }
    }

    /// Non-fan TCP segments of one stage and direction, with their times.
    pub fn segments(&self, stage: Stage, direction: Direction) -> impl Iterator<Item = (u64, &Segment)> + '_ {
        self.frames
            .iter()
            .filter(move |f| f.stage == stage && f.direction == direction)
            .filter_map(|f| f.segment().map(|s| (f.at_us, s)))
    }

    pub fn received(&self, stage: Stage) -> impl Iterator<Item = (u64, &Segment)> + '_ {
        self.segments(stage, Direction::Received)
    }

    pub fn sent(&self, stage: Stage) -> impl Iterator<Item = (u64, &Segment)> + '_ {
        self.segments(stage, Direction::Sent)
    }

    /// First SYN/ACK of a stage.
    pub fn syn_ack(&self, stage: Stage) -> Option<(u64, &Segment)> {
        self.received(stage).find(|(_, s)| s.is_syn_ack())
    }

    pub fn got_reset(&self, stage: Stage) -> bool {
        self.received(stage).any(|(_, s)| s.is(TcpFlags::RST))
    }

    /// ICMP messages in the exchange.
    pub fn icmp(&self) -> Vec<(Vec<u8>, Ipv4Addr)> {
        self.frames
            .iter()
            .filter_map(|f| match &f.packet {
                Packet::Icmp { source, bytes } => hex::decode(bytes).ok().map(|b| (b, *source)),
                Packet::Tcp { .. } => None,
            })
            .collect()
    }

    /// Hop observations decoded from the ICMP quotes of the fan copies.
    pub fn observations(&self) -> Vec<PathObservation> {
        let Some(record) = &self.fan else { return Vec::new() };
        let fan = record.rebuild();
        let icmp = self.icmp();
        fan.observations(icmp.iter().map(|(b, s)| (b.as_slice(), *s)))
    }
}
