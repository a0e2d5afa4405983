//! Path interference detection with TTL-limited probe copies.
//!
//! Each copy of a test's first segment carries its IP TTL redundantly in
//! several header fields. A router that expires the copy quotes it back in
//! an ICMP time-exceeded message; decoding the quote recovers the hop number
//! even when some carrier fields were rewritten on the way, and diffing the
//! quote against what was sent shows what the path changed.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::segment::{
    encode_options, find_mss, options_len, parse_icmp_time_exceeded, verify_tcp_checksum, PartialSegment, Segment,
    TcpFlags, TcpOption, MAX_OPTIONS_LEN,
};

/// Highest TTL used by a fan.
pub const MAX_TTL: u8 = 30;

const VALUE_BITS: u32 = 5;
const VALUE_MASK: u32 = 0x1f;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TracerError {
    #[error("TTL value {0} outside 1..=30")]
    ValueOutOfRange(u8),
    #[error("none of the carrier fields is present in the quote")]
    NoCarrierAvailable,
}

bitflags! {
    /// Header fields that carry the encoded TTL.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct Carriers: u8 {
        const IPV4_ID = 0x01;
        const ACK_NUM = 0x02;
        const WINDOW = 0x04;
        const URGENT_PTR = 0x08;
        const NOOP_COUNT = 0x10;
    }
}

impl Carriers {
    /// Number of 5-bit copies a carrier holds.
    fn copies(self) -> usize {
        match self {
            Carriers::ACK_NUM => 6,
            Carriers::NOOP_COUNT => 1,
            _ => 3,
        }
    }
}

impl Serialize for Carriers {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let names: Vec<&str> = self.iter_names().map(|(name, _)| name).collect();
        names.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Carriers {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let names = Vec::<String>::deserialize(d)?;
        names.iter().try_fold(Carriers::empty(), |acc, name| {
            Carriers::from_name(name)
                .map(|c| acc | c)
                .ok_or_else(|| serde::de::Error::custom(format!("unknown carrier {name}")))
        })
    }
}

/// Packs a 5-bit value three times into bits [14..10], [9..5], [4..0].
pub fn pack16(value: u8) -> u16 {
    let v = u16::from(value) & VALUE_MASK as u16;
    (v << 10) | (v << 5) | v
}

/// Packs a 5-bit value six times into bits [29..25] down to [4..0].
pub fn pack32(value: u8) -> u32 {
    let v = u32::from(value) & VALUE_MASK;
    (0..6).fold(0, |acc, i| acc | (v << (VALUE_BITS * i)))
}

fn unpack(word: u32, copies: u32) -> (Vec<u8>, bool) {
    let values = (0..copies).map(|i| ((word >> (VALUE_BITS * i)) & VALUE_MASK) as u8).collect();
    (values, word >> (VALUE_BITS * copies) == 0)
}

/// Field values that encode one TTL.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TtlEncoding {
    pub value: u8,
    pub ip_id: Option<u16>,
    pub ack: Option<u32>,
    pub window: Option<u16>,
    pub urgent_pointer: Option<u16>,
    /// Number of NOOP options to place right after the fixed header.
    pub noops: Option<usize>,
}

impl TtlEncoding {
    pub fn apply(&self, segment: &mut Segment) {
        if let Some(id) = self.ip_id {
            segment.ip.identification = id;
        }
        if let Some(ack) = self.ack {
            segment.tcp.ack = ack;
        }
        if let Some(window) = self.window {
            segment.tcp.window = window;
        }
        if let Some(urg) = self.urgent_pointer {
            segment.tcp.urgent_pointer = urg;
        }
        if let Some(n) = self.noops {
            let mut options = vec![TcpOption::Noop; n];
            options.append(&mut segment.tcp.options);
            segment.tcp.options = options;
        }
    }
}

pub fn encode_ttl(value: u8, carriers: Carriers) -> Result<TtlEncoding, TracerError> {
    if !(1..=MAX_TTL).contains(&value) {
        return Err(TracerError::ValueOutOfRange(value));
    }
    let on = |c: Carriers| carriers.contains(c);
    Ok(TtlEncoding {
        value,
        ip_id: on(Carriers::IPV4_ID).then(|| pack16(value)),
        ack: on(Carriers::ACK_NUM).then(|| pack32(value)),
        window: on(Carriers::WINDOW).then(|| pack16(value)),
        urgent_pointer: on(Carriers::URGENT_PTR).then(|| pack16(value)),
        noops: on(Carriers::NOOP_COUNT).then_some(usize::from(value)),
    })
}

/// Result of decoding a quote.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TtlDecode {
    pub value: Option<u8>,
    /// Fraction of all extracted copies that equal `value`.
    pub confidence: f64,
    pub copies: usize,
}

struct CarrierReading {
    values: Vec<u8>,
    // all copies equal, leftover high bits clear, value within 1..=30
    consistent: bool,
}

fn read_carriers(quote: &PartialSegment, carriers: Carriers) -> Vec<CarrierReading> {
    let mut readings = Vec::new();
    let mut numeric = |word: Option<u32>, carrier: Carriers| {
        if let (true, Some(word)) = (carriers.contains(carrier), word) {
            let (values, high_clear) = unpack(word, carrier.copies() as u32);
            let first = values[0];
            let consistent = high_clear && (1..=MAX_TTL).contains(&first) && values.iter().all(|v| *v == first);
            readings.push(CarrierReading { values, consistent });
        }
    };
    numeric(Some(u32::from(quote.ip.identification)), Carriers::IPV4_ID);
    numeric(quote.tcp.ack, Carriers::ACK_NUM);
    numeric(quote.tcp.window.map(u32::from), Carriers::WINDOW);
    numeric(quote.tcp.urgent_pointer.map(u32::from), Carriers::URGENT_PTR);
    if carriers.contains(Carriers::NOOP_COUNT) {
        if let Some(options) = quote.options() {
            let count = options.iter().filter(|o| **o == TcpOption::Noop).count();
            let value = count.min(usize::from(u8::MAX)) as u8;
            readings.push(CarrierReading { values: vec![value], consistent: (1..=MAX_TTL).contains(&value) });
        }
    }
    readings
}

/// Recovers the TTL a quoted copy was sent with.
///
/// Only carriers whose copies agree among themselves vote, weighted by copy
/// count; the winner needs a strict majority of those votes. Confidence is
/// measured over every extracted copy, so a rewritten carrier lowers it.
pub fn decode_ttl(quote: &PartialSegment, carriers: Carriers) -> Result<TtlDecode, TracerError> {
    let readings = read_carriers(quote, carriers);
    if readings.is_empty() {
        return Err(TracerError::NoCarrierAvailable);
    }
    let mut votes: HashMap<u8, usize> = HashMap::new();
    let mut total_votes = 0;
    for r in readings.iter().filter(|r| r.consistent) {
        *votes.entry(r.values[0]).or_default() += r.values.len();
        total_votes += r.values.len();
    }
    let copies: usize = readings.iter().map(|r| r.values.len()).sum();
    let winner = votes.iter().filter(|(_, &count)| count * 2 > total_votes).map(|(&value, _)| value).next();
    let confidence = match winner {
        Some(w) => {
            let agreeing = readings.iter().flat_map(|r| &r.values).filter(|v| **v == w).count();
            agreeing as f64 / copies as f64
        }
        None => 0.0,
    };
    Ok(TtlDecode { value: winner, confidence, copies })
}

/// Carriers usable with a base segment: the NOOP carrier is dropped when
/// the largest count would not fit next to the segment's own options.
pub fn effective_carriers(base: &Segment, max_ttl: u8, carriers: Carriers) -> Carriers {
    let mut effective = carriers;
    if options_len(&base.tcp.options) + usize::from(max_ttl) > MAX_OPTIONS_LEN {
        effective.remove(Carriers::NOOP_COUNT);
    }
    effective
}

/// Copies of `base` with TTL 1..=max_ttl, each carrying its TTL encoded in
/// the given carriers. A correct TCP checksum is recomputed per copy; a
/// deliberately wrong one stays wrong.
pub fn build_fan(base: &Segment, max_ttl: u8, carriers: Carriers) -> Vec<Segment> {
    let carriers = effective_carriers(base, max_ttl, carriers);
    let base_valid = verify_tcp_checksum(base);
    (1..=max_ttl.min(MAX_TTL))
        .map(|ttl| {
            let mut copy = base.clone();
            copy.ip.ttl = ttl;
            encode_ttl(ttl, carriers).expect("ttl within range").apply(&mut copy);
            if base_valid {
                copy.finalize()
            } else {
                let mut copy = copy.finalize_keep_tcp_checksum();
                while copy.tcp.checksum != 0 && verify_tcp_checksum(&copy) {
                    copy.tcp.checksum ^= 0x8000;
                }
                copy
            }
        })
        .collect()
}

/// Header field names used for path diffs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    IpId,
    SourcePort,
    DestPort,
    Seq,
    Ack,
    ReservedBits,
    UrgFlag,
    Flags,
    Window,
    /// Validity of the TCP checksum (valid, zero, invalid), not its value.
    Checksum,
    UrgentPointer,
    Options,
    Mss,
    Payload,
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).ok();
        f.write_str(s.as_ref().and_then(|v| v.as_str()).unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldDiff {
    pub field: Field,
    pub sent: String,
    pub observed: String,
}

/// One decoded ICMP time-exceeded quote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathObservation {
    pub hop: u8,
    pub router_addr: Ipv4Addr,
    pub quoted: PartialSegment,
    pub diffs: Vec<FieldDiff>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathDiagnosis {
    pub modified: bool,
    pub first_modifying_hop: Option<u8>,
    pub relevant_fields: Vec<Field>,
}

fn mss_text(mss: Option<u16>) -> String {
    mss.map_or_else(|| "none".to_owned(), |v| v.to_string())
}

/// Diffs a quote against the exact copy that was sent. Fields the quote
/// does not contain are skipped.
pub fn diff_quote(sent: &Segment, quote: &PartialSegment) -> Vec<FieldDiff> {
    let mut diffs = Vec::new();
    let mut cmp = |field: Field, sent: String, observed: Option<String>| {
        if let Some(observed) = observed {
            if observed != sent {
                diffs.push(FieldDiff { field, sent, observed });
            }
        }
    };
    let t = &quote.tcp;
    cmp(Field::IpId, sent.ip.identification.to_string(), Some(quote.ip.identification.to_string()));
    cmp(Field::SourcePort, sent.tcp.source_port.to_string(), Some(t.source_port.to_string()));
    cmp(Field::DestPort, sent.tcp.dest_port.to_string(), Some(t.dest_port.to_string()));
    cmp(Field::Seq, sent.tcp.seq.to_string(), Some(t.seq.to_string()));
    cmp(Field::Ack, sent.tcp.ack.to_string(), t.ack.map(|v| v.to_string()));
    cmp(Field::ReservedBits, sent.tcp.reserved.to_string(), t.reserved.map(|v| v.to_string()));
    let urg = |f: TcpFlags| f.contains(TcpFlags::URG).to_string();
    cmp(Field::UrgFlag, urg(sent.tcp.flags), t.flags.map(urg));
    let others = |f: TcpFlags| (f - TcpFlags::URG).to_string();
    cmp(Field::Flags, others(sent.tcp.flags), t.flags.map(others));
    cmp(Field::Window, sent.tcp.window.to_string(), t.window.map(|v| v.to_string()));
    cmp(Field::Checksum, sent.checksum_state().to_string(), quote.checksum_state().map(|s| s.to_string()));
    cmp(Field::UrgentPointer, sent.tcp.urgent_pointer.to_string(), t.urgent_pointer.map(|v| v.to_string()));
    let sent_options = encode_options(&sent.tcp.options).unwrap_or_default();
    cmp(Field::Options, hex::encode(sent_options), t.option_bytes.as_ref().map(hex::encode));
    cmp(Field::Mss, mss_text(find_mss(&sent.tcp.options)), quote.mss().map(mss_text));
    cmp(Field::Payload, hex::encode(&sent.payload), t.payload.as_ref().map(hex::encode));
    diffs
}

pub fn observe(sent: &Segment, quote: PartialSegment, hop: u8, router: Ipv4Addr, confidence: f64) -> PathObservation {
    PathObservation { hop, router_addr: router, diffs: diff_quote(sent, &quote), quoted: quote, confidence }
}

/// Decides whether the path altered the tested behavior. Only diffs on
/// `relevant` fields count; the earliest such hop is reported.
pub fn diagnose(observations: &[PathObservation], relevant: &[Field]) -> PathDiagnosis {
    let first_modifying_hop =
        observations.iter().filter(|o| o.diffs.iter().any(|d| relevant.contains(&d.field))).map(|o| o.hop).min();
    PathDiagnosis { modified: first_modifying_hop.is_some(), first_modifying_hop, relevant_fields: relevant.to_vec() }
}

/// A built fan plus the state needed to correlate ICMP replies with it.
#[derive(Debug, Clone)]
pub struct Fan {
    base: Segment,
    carriers: Carriers,
    copies: Vec<Segment>,
}

impl Fan {
    pub fn new(base: &Segment, max_ttl: u8, carriers: Carriers) -> Fan {
        Fan {
            base: base.clone(),
            carriers: effective_carriers(base, max_ttl, carriers),
            copies: build_fan(base, max_ttl, carriers),
        }
    }

    pub fn copies(&self) -> &[Segment] {
        &self.copies
    }

    pub fn carriers(&self) -> Carriers {
        self.carriers
    }

    /// Maps an ICMP message from `router` to a hop observation. Returns
    /// `None` for anything that is not a decodable quote of this fan.
    pub fn correlate(&self, icmp: &[u8], router: Ipv4Addr) -> Option<PathObservation> {
        let quote = parse_icmp_time_exceeded(icmp).ok()?.quote;
        // the source port may be translated on the way; destination and
        // sequence number identify the probe
        if quote.ip.dest_addr != self.base.ip.dest_addr
            || quote.tcp.dest_port != self.base.tcp.dest_port
            || quote.tcp.seq != self.base.tcp.seq
        {
            return None;
        }
        let decoded = decode_ttl(&quote, self.carriers).ok()?;
        let hop = decoded.value?;
        let sent = self.copies.get(usize::from(hop) - 1)?;
        Some(observe(sent, quote, hop, router, decoded.confidence))
    }

    /// Correlates a batch of ICMP messages, ordered by hop.
    pub fn observations<'a>(&self, icmp: impl IntoIterator<Item = (&'a [u8], Ipv4Addr)>) -> Vec<PathObservation> {
        let mut obs: Vec<_> = icmp.into_iter().filter_map(|(bytes, router)| self.correlate(bytes, router)).collect();
        obs.sort_by_key(|o| o.hop);
        obs
    }
}
