//! IPv4/TCP segment construction, serialization and parsing.
//!
//! Serialization is literal: checksum fields are written exactly as stored so
//! that probes can carry deliberately wrong values. Call
//! [`Segment::finalize`] to fill in lengths and correct checksums.

mod checksum;
mod icmp;
mod options;
mod partial;

use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use bitflags::bitflags;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub use checksum::{compute_tcp_checksum, internet_checksum, ipv4_header_checksum, verify_tcp_checksum, Accumulator};
pub use icmp::{build_icmp_time_exceeded, parse_icmp_time_exceeded, strip_ipv4_header, IcmpQuote};
pub use options::{
    decode_options, encode_options, find_mss, is_assigned_kind, options_len, TcpOption, MAX_OPTIONS_LEN,
};
pub use partial::{PartialSegment, PartialTcp};

pub const IPV4_HEADER_LEN: usize = 20;
pub const TCP_HEADER_LEN: usize = 20;
pub const PROTO_TCP: u8 = 6;
pub const DEFAULT_TTL: u8 = 64;
const FLAG_DF: u16 = 0x4000;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum SegmentError {
    #[error("options occupy {0} bytes, limit is 40")]
    OversizeOptions(usize),
    #[error("packet of {0} bytes exceeds 65535")]
    OversizePacket(usize),
    #[error("truncated: need {needed} bytes, have {have}")]
    Truncated { needed: usize, have: usize },
    #[error("bad TCP data offset {0}")]
    BadDataOffset(u8),
    #[error("not an IPv4 packet (version {0})")]
    BadIpVersion(u8),
    #[error("bad IPv4 header length {0}")]
    BadHeaderLength(u8),
    #[error("not TCP (protocol {0})")]
    NotTcp(u8),
    #[error("not an ICMP time-exceeded message (type {kind}, code {code})")]
    NotTimeExceeded { kind: u8, code: u8 },
    #[error("ICMP quote of {0} bytes is shorter than IP header plus 8 bytes")]
    TruncatedQuote(usize),
}

bitflags! {
    /// The eight allocated TCP control bits.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct TcpFlags: u8 {
        const FIN = 0x01;
        const SYN = 0x02;
        const RST = 0x04;
        const PSH = 0x08;
        const ACK = 0x10;
        const URG = 0x20;
        const ECE = 0x40;
        const CWR = 0x80;
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [(TcpFlags, char); 8] = [
            (TcpFlags::CWR, 'C'),
            (TcpFlags::ECE, 'E'),
            (TcpFlags::URG, 'U'),
            (TcpFlags::ACK, 'A'),
            (TcpFlags::PSH, 'P'),
            (TcpFlags::RST, 'R'),
            (TcpFlags::SYN, 'S'),
            (TcpFlags::FIN, 'F'),
        ];
        for (flag, c) in NAMES {
            if self.contains(flag) {
                write!(f, "{c}")?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Header {
    pub tos: u8,
    pub total_length: u16,
    pub identification: u16,
    /// Flags and fragment offset word; only DF is ever set by this crate.
    pub flags_fragment: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub header_checksum: u16,
    pub source_addr: Ipv4Addr,
    pub dest_addr: Ipv4Addr,
}

impl Ipv4Header {
    pub fn new(source_addr: Ipv4Addr, dest_addr: Ipv4Addr) -> Self {
        Ipv4Header {
            tos: 0,
            total_length: 0,
            identification: 0,
            flags_fragment: FLAG_DF,
            ttl: DEFAULT_TTL,
            protocol: PROTO_TCP,
            header_checksum: 0,
            source_addr,
            dest_addr,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.push(0x45);
        out.push(self.tos);
        out.extend_from_slice(&self.total_length.to_be_bytes());
        out.extend_from_slice(&self.identification.to_be_bytes());
        out.extend_from_slice(&self.flags_fragment.to_be_bytes());
        out.push(self.ttl);
        out.push(self.protocol);
        out.extend_from_slice(&self.header_checksum.to_be_bytes());
        out.extend_from_slice(&self.source_addr.octets());
        out.extend_from_slice(&self.dest_addr.octets());
    }

    /// Parses the fixed IPv4 header and returns it along with the header
    /// length in bytes (IP options are skipped).
    pub fn parse(bytes: &[u8]) -> Result<(Ipv4Header, usize), SegmentError> {
        if bytes.len() < IPV4_HEADER_LEN {
            return Err(SegmentError::Truncated { needed: IPV4_HEADER_LEN, have: bytes.len() });
        }
        let version = bytes[0] >> 4;
        if version != 4 {
            return Err(SegmentError::BadIpVersion(version));
        }
        let ihl = bytes[0] & 0x0f;
        if ihl < 5 {
            return Err(SegmentError::BadHeaderLength(ihl));
        }
        let header_len = usize::from(ihl) * 4;
        if bytes.len() < header_len {
            return Err(SegmentError::Truncated { needed: header_len, have: bytes.len() });
        }
        let be16 = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let header = Ipv4Header {
            tos: bytes[1],
            total_length: be16(2),
            identification: be16(4),
            flags_fragment: be16(6),
            ttl: bytes[8],
            protocol: bytes[9],
            header_checksum: be16(10),
            source_addr: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
            dest_addr: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
        };
        Ok((header, header_len))
    }

    pub fn checksum_valid(&self) -> bool {
        self.header_checksum == ipv4_header_checksum(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpHeader {
    pub source_port: u16,
    pub dest_port: u16,
    pub seq: u32,
    pub ack: u32,
    /// The 4-bit reserved field. Bit 0 is the one adjacent to CWR.
    pub reserved: u8,
    pub flags: TcpFlags,
    pub window: u16,
    pub checksum: u16,
    pub urgent_pointer: u16,
    pub options: Vec<TcpOption>,
}

impl TcpHeader {
    pub fn new(source_port: u16, dest_port: u16) -> Self {
        TcpHeader {
            source_port,
            dest_port,
            seq: 0,
            ack: 0,
            reserved: 0,
            flags: TcpFlags::empty(),
            window: 64240,
            checksum: 0,
            urgent_pointer: 0,
            options: Vec::new(),
        }
    }

    /// Header length in bytes, options padded.
    pub fn header_len(&self) -> usize {
        TCP_HEADER_LEN + options_len(&self.options).div_ceil(4) * 4
    }

    /// Header length in 32-bit words, as carried in the data offset field.
    pub fn data_offset(&self) -> u8 {
        (self.header_len() / 4) as u8
    }

    pub fn mss(&self) -> Option<u16> {
        find_mss(&self.options)
    }
}

/// A TCP segment inside an IPv4 datagram without IP options.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub ip: Ipv4Header,
    pub tcp: TcpHeader,
    pub payload: Vec<u8>,
}

impl Segment {
    /// A bare segment between two endpoints; no flags, zero sequence numbers.
    pub fn new(src: SocketAddrV4, dst: SocketAddrV4) -> Self {
        Segment {
            ip: Ipv4Header::new(*src.ip(), *dst.ip()),
            tcp: TcpHeader::new(src.port(), dst.port()),
            payload: Vec::new(),
        }
    }

    pub fn source(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.ip.source_addr, self.tcp.source_port)
    }

    pub fn destination(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.ip.dest_addr, self.tcp.dest_port)
    }

    pub fn with_flags(mut self, flags: TcpFlags) -> Self {
        self.tcp.flags = flags;
        self
    }

    pub fn with_seq(mut self, seq: u32) -> Self {
        self.tcp.seq = seq;
        self
    }

    pub fn with_ack(mut self, ack: u32) -> Self {
        self.tcp.ack = ack;
        self
    }

    pub fn with_options(mut self, options: Vec<TcpOption>) -> Self {
        self.tcp.options = options;
        self
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }

    pub fn with_ttl(mut self, ttl: u8) -> Self {
        self.ip.ttl = ttl;
        self
    }

    pub fn with_id(mut self, id: u16) -> Self {
        self.ip.identification = id;
        self
    }

    pub fn with_window(mut self, window: u16) -> Self {
        self.tcp.window = window;
        self
    }

    pub fn is(&self, flags: TcpFlags) -> bool {
        self.tcp.flags.contains(flags)
    }

    pub fn is_syn_ack(&self) -> bool {
        self.is(TcpFlags::SYN | TcpFlags::ACK)
    }

    /// Sequence space consumed: payload plus one each for SYN and FIN.
    pub fn seq_len(&self) -> u32 {
        let mut len = self.payload.len() as u32;
        if self.is(TcpFlags::SYN) {
            len += 1;
        }
        if self.is(TcpFlags::FIN) {
            len += 1;
        }
        len
    }

    pub fn wire_len(&self) -> usize {
        IPV4_HEADER_LEN + self.tcp.header_len() + self.payload.len()
    }

    /// Sets total length, IP header checksum and a correct TCP checksum.
    pub fn finalize(mut self) -> Self {
        self.refresh_lengths();
        self.tcp.checksum = compute_tcp_checksum(&self);
        self.ip.header_checksum = ipv4_header_checksum(&self.ip);
        self
    }

    /// Sets total length and the IP header checksum, leaving the TCP
    /// checksum field as stored.
    pub fn finalize_keep_tcp_checksum(mut self) -> Self {
        self.refresh_lengths();
        self.ip.header_checksum = ipv4_header_checksum(&self.ip);
        self
    }

    fn refresh_lengths(&mut self) {
        self.ip.total_length = self.wire_len().min(usize::from(u16::MAX)) as u16;
    }

    pub fn checksum_valid(&self) -> bool {
        verify_tcp_checksum(self)
    }

    pub fn checksum_state(&self) -> ChecksumState {
        if self.tcp.checksum == 0 {
            ChecksumState::Zero
        } else if self.checksum_valid() {
            ChecksumState::Valid
        } else {
            ChecksumState::Invalid
        }
    }

    /// Network-order wire bytes. The total length and data offset are
    /// derived from content; every other field is written as stored.
    pub fn serialize(&self) -> Result<Vec<u8>, SegmentError> {
        let options = encode_options(&self.tcp.options)?;
        let total = IPV4_HEADER_LEN + TCP_HEADER_LEN + options.len() + self.payload.len();
        if total > usize::from(u16::MAX) {
            return Err(SegmentError::OversizePacket(total));
        }
        let mut out = Vec::with_capacity(total);
        let mut ip = self.ip.clone();
        ip.total_length = total as u16;
        ip.write(&mut out);

        let tcp = &self.tcp;
        out.extend_from_slice(&tcp.source_port.to_be_bytes());
        out.extend_from_slice(&tcp.dest_port.to_be_bytes());
        out.extend_from_slice(&tcp.seq.to_be_bytes());
        out.extend_from_slice(&tcp.ack.to_be_bytes());
        let offset = ((TCP_HEADER_LEN + options.len()) / 4) as u8;
        out.push((offset << 4) | (tcp.reserved & 0x0f));
        out.push(tcp.flags.bits());
        out.extend_from_slice(&tcp.window.to_be_bytes());
        out.extend_from_slice(&tcp.checksum.to_be_bytes());
        out.extend_from_slice(&tcp.urgent_pointer.to_be_bytes());
        out.extend_from_slice(&options);
        out.extend_from_slice(&self.payload);
        Ok(out)
    }

    /// Parses a complete IPv4/TCP datagram. Bytes beyond the IP total length
    /// (link-layer padding) are ignored.
    pub fn parse(bytes: &[u8]) -> Result<Segment, SegmentError> {
        let (ip, ip_len) = Ipv4Header::parse(bytes)?;
        if ip.protocol != PROTO_TCP {
            return Err(SegmentError::NotTcp(ip.protocol));
        }
        let total = usize::from(ip.total_length);
        if total < ip_len + TCP_HEADER_LEN || bytes.len() < total {
            let needed = total.max(ip_len + TCP_HEADER_LEN);
            return Err(SegmentError::Truncated { needed, have: bytes.len() });
        }
        let tcp_bytes = &bytes[ip_len..total];
        let offset = tcp_bytes[12] >> 4;
        if offset < 5 {
            return Err(SegmentError::BadDataOffset(offset));
        }
        let header_len = usize::from(offset) * 4;
        if header_len > tcp_bytes.len() {
            return Err(SegmentError::Truncated { needed: ip_len + header_len, have: total });
        }
        let be16 = |i: usize| u16::from_be_bytes([tcp_bytes[i], tcp_bytes[i + 1]]);
        let be32 = |i: usize| u32::from_be_bytes([tcp_bytes[i], tcp_bytes[i + 1], tcp_bytes[i + 2], tcp_bytes[i + 3]]);
        let tcp = TcpHeader {
            source_port: be16(0),
            dest_port: be16(2),
            seq: be32(4),
            ack: be32(8),
            reserved: tcp_bytes[12] & 0x0f,
            flags: TcpFlags::from_bits_retain(tcp_bytes[13]),
            window: be16(14),
            checksum: be16(16),
            urgent_pointer: be16(18),
            options: decode_options(&tcp_bytes[TCP_HEADER_LEN..header_len]),
        };
        Ok(Segment { ip, tcp, payload: tcp_bytes[header_len..].to_vec() })
    }

    /// Parses whatever prefix of a datagram is available, as found in ICMP
    /// quotes. Needs the IP header plus the first 8 TCP bytes.
    pub fn parse_partial(bytes: &[u8]) -> Result<PartialSegment, SegmentError> {
        PartialSegment::parse(bytes)
    }

    pub fn summary(&self) -> String {
        format!(
            "{}:{} > {}:{} [{}] seq={} ack={} win={} len={} ttl={} rsv={:#x}",
            self.ip.source_addr,
            self.tcp.source_port,
            self.ip.dest_addr,
            self.tcp.dest_port,
            self.tcp.flags,
            self.tcp.seq,
            self.tcp.ack,
            self.tcp.window,
            self.payload.len(),
            self.ip.ttl,
            self.tcp.reserved,
        )
    }
}

impl Serialize for Segment {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let bytes = Segment::serialize(self).map_err(serde::ser::Error::custom)?;
        serializer.serialize_str(&hex::encode(bytes))
    }
}

impl<'de> Deserialize<'de> for Segment {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let bytes = hex::decode(text).map_err(serde::de::Error::custom)?;
        Segment::parse(&bytes).map_err(serde::de::Error::custom)
    }
}

/// How a segment's TCP checksum field relates to its content.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ChecksumState {
    Valid,
    Zero,
    Invalid,
}

impl fmt::Display for ChecksumState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ChecksumState::Valid => "valid",
            ChecksumState::Zero => "zero",
            ChecksumState::Invalid => "invalid",
        };
        f.write_str(s)
    }
}

/// Wrapping sequence-number comparison: `a` is at or after `b`.
pub fn seq_ge(a: u32, b: u32) -> bool {
    (a.wrapping_sub(b) as i32) >= 0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(a: [u8; 4], port: u16) -> SocketAddrV4 {
        SocketAddrV4::new(Ipv4Addr::from(a), port)
    }

    fn syn() -> Segment {
        Segment::new(ep([10, 0, 0, 1], 40000), ep([10, 0, 0, 2], 80))
            .with_flags(TcpFlags::SYN)
            .with_window(65535)
            .finalize()
    }

    #[test]
    fn minimal_syn_is_forty_bytes() {
        let bytes = syn().serialize().unwrap();
        assert_eq!(bytes.len(), 40);
        assert_eq!(bytes[32] >> 4, 5);
    }

    #[test]
    fn mss_syn_has_offset_six() {
        let s = syn().with_options(vec![TcpOption::Mss(515)]).finalize();
        let bytes = s.serialize().unwrap();
        assert_eq!(s.tcp.header_len(), 24);
        assert_eq!(s.tcp.data_offset(), 6);
        assert_eq!(bytes[32] >> 4, 6);
        assert_eq!(&bytes[40..44], &[2, 4, 2, 3]);
    }

    #[test]
    fn forty_one_noops_is_oversize() {
        let s = syn().with_options(vec![TcpOption::Noop; 41]);
        assert!(matches!(s.serialize(), Err(SegmentError::OversizeOptions(41))));
    }

    #[test]
    fn oversize_packet() {
        let s = syn().with_payload(vec![0u8; 65535 - 40 + 1]);
        assert!(matches!(s.serialize(), Err(SegmentError::OversizePacket(65536))));
    }

    #[test]
    fn data_offset_four_rejected() {
        let mut bytes = syn().serialize().unwrap();
        bytes[32] = 0x40;
        assert_eq!(Segment::parse(&bytes), Err(SegmentError::BadDataOffset(4)));
    }

    #[test]
    fn ipv6_version_rejected() {
        let mut bytes = syn().serialize().unwrap();
        bytes[0] = 0x65;
        assert_eq!(Segment::parse(&bytes), Err(SegmentError::BadIpVersion(6)));
    }

    #[test]
    fn short_input_truncated() {
        let bytes = syn().serialize().unwrap();
        assert!(matches!(Segment::parse(&bytes[..30]), Err(SegmentError::Truncated { .. })));
    }

    #[test]
    fn link_padding_ignored() {
        let s = syn();
        let mut bytes = s.serialize().unwrap();
        bytes.extend_from_slice(&[0; 6]);
        assert_eq!(Segment::parse(&bytes).unwrap(), s);
    }

    #[test]
    fn checksum_state_classification() {
        let s = syn();
        assert_eq!(s.checksum_state(), ChecksumState::Valid);
        let mut z = s.clone();
        z.tcp.checksum = 0;
        assert_eq!(z.checksum_state(), ChecksumState::Zero);
        let mut bad = s.clone();
        bad.tcp.checksum ^= 0x0101;
        assert_eq!(bad.checksum_state(), ChecksumState::Invalid);
    }

    #[test]
    fn payload_byte_flip_breaks_checksum() {
        let s = syn().with_payload(b"hello world".to_vec()).finalize();
        assert!(s.checksum_valid());
        for i in 0..s.payload.len() {
            let mut t = s.clone();
            t.payload[i] ^= 0x5a;
            assert!(!t.checksum_valid(), "flip at {i} went unnoticed");
        }
    }

    #[test]
    fn reserved_bits_round_trip() {
        for r in 0..16u8 {
            let mut s = syn();
            s.tcp.reserved = r;
            let s = s.finalize();
            assert_eq!(Segment::parse(&s.serialize().unwrap()).unwrap().tcp.reserved, r);
        }
    }

    #[test]
    fn seq_comparison_wraps() {
        assert!(seq_ge(5, u32::MAX - 3));
        assert!(!seq_ge(u32::MAX - 3, 5));
        assert!(seq_ge(7, 7));
    }
}
