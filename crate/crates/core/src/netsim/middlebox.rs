use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::segment::{is_assigned_kind, options_len, ChecksumState, Segment, TcpOption, MAX_OPTIONS_LEN};

/// How much of an expired datagram a router quotes back.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum QuoteLen {
    #[default]
    Full,
    /// IP header plus the first 8 TCP bytes.
    #[serde(rename = "MIN_28")]
    Min28,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MiddleboxKind {
    /// Overwrites the value of an existing MSS option.
    MssClamp(u16),
    /// Adds an MSS option to SYNs that have none.
    MssInsert(u16),
    /// Removes NOOP and EOOL options.
    StripPadding,
    /// Removes options of unassigned kinds.
    StripUnknownOption,
    ClearReserved,
    /// Rewrites every TCP checksum to the correct value.
    FixChecksum,
    /// Translates the client's source port.
    NatRewrite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MiddleboxSpec {
    pub hop: u8,
    pub kind: MiddleboxKind,
    #[serde(default)]
    pub quote_len: QuoteLen,
}

/// Port translation table of a NAT hop.
#[derive(Debug, Default, Clone)]
pub struct NatTable {
    next_port: u16,
    outbound: HashMap<u16, u16>,
    inbound: HashMap<u16, u16>,
}

const NAT_BASE_PORT: u16 = 20_000;

impl NatTable {
    fn translate(&mut self, port: u16) -> u16 {
        if let Some(p) = self.outbound.get(&port) {
            return *p;
        }
        let mapped = NAT_BASE_PORT.wrapping_add(self.next_port);
        self.next_port = self.next_port.wrapping_add(1);
        self.outbound.insert(port, mapped);
        self.inbound.insert(mapped, port);
        mapped
    }
}

/// Recomputes checksums after a rewrite so that a valid checksum stays
/// valid and a broken one stays broken.
fn refinish(segment: &mut Segment, before: ChecksumState) {
    let kept = segment.tcp.checksum;
    *segment = segment.clone().finalize();
    match before {
        ChecksumState::Valid => {}
        ChecksumState::Zero => segment.tcp.checksum = 0,
        ChecksumState::Invalid => {
            let correct = segment.tcp.checksum;
            segment.tcp.checksum = if kept != correct && kept != 0 {
                kept
            } else if correct ^ 0x8000 != 0 {
                correct ^ 0x8000
            } else {
                correct ^ 0x4000
            };
        }
    }
}

impl MiddleboxKind {
    /// Rewrites a client-to-endpoint segment in place.
    pub fn apply_outbound(&self, segment: &mut Segment, nat: &mut NatTable) {
        let before = segment.checksum_state();
        let options = &mut segment.tcp.options;
        match *self {
            MiddleboxKind::MssClamp(value) => {
                for o in options.iter_mut() {
                    if let TcpOption::Mss(v) = o {
                        *v = value;
                    }
                }
            }
            MiddleboxKind::MssInsert(value) => {
                let is_syn = segment.tcp.flags.contains(crate::segment::TcpFlags::SYN);
                let has_mss = options.iter().any(|o| matches!(o, TcpOption::Mss(_)));
                if is_syn && !has_mss {
                    // appended in front of any trailing end-of-list marker
                    let at = options.iter().position(|o| *o == TcpOption::Eool).unwrap_or(options.len());
                    options.insert(at, TcpOption::Mss(value));
                    if options_len(options) > MAX_OPTIONS_LEN {
                        options.remove(at);
                    }
                }
            }
            MiddleboxKind::StripPadding => {
                options.retain(|o| !matches!(o, TcpOption::Noop | TcpOption::Eool));
            }
            MiddleboxKind::StripUnknownOption => {
                options.retain(|o| o.kind().is_none_or(is_assigned_kind));
            }
            MiddleboxKind::ClearReserved => segment.tcp.reserved = 0,
            MiddleboxKind::FixChecksum => {
                *segment = segment.clone().finalize();
                return;
            }
            MiddleboxKind::NatRewrite => {
                segment.tcp.source_port = nat.translate(segment.tcp.source_port);
            }
        }
        refinish(segment, before);
    }

    /// Rewrites an endpoint-to-client segment in place.
    pub fn apply_inbound(&self, segment: &mut Segment, nat: &mut NatTable) {
        match *self {
            MiddleboxKind::NatRewrite => {
                if let Some(p) = nat.inbound.get(&segment.tcp.dest_port) {
                    let before = segment.checksum_state();
                    segment.tcp.dest_port = *p;
                    refinish(segment, before);
                }
            }
            MiddleboxKind::FixChecksum => {
                *segment = segment.clone().finalize();
            }
            _ => {}
        }
    }
}
