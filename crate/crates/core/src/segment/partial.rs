use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{
    decode_options, find_mss, ChecksumState, Ipv4Header, Segment, SegmentError, TcpFlags, TcpOption, PROTO_TCP,
    TCP_HEADER_LEN,
};

/// TCP fields recovered from a possibly truncated datagram. Ports and
/// sequence number are always present; everything else is `None` when the
/// quote ends before it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialTcp {
    pub source_port: u16,
    pub dest_port: u16,
    pub seq: u32,
    pub ack: Option<u32>,
    pub data_offset: Option<u8>,
    pub reserved: Option<u8>,
    pub flags: Option<TcpFlags>,
    pub window: Option<u16>,
    pub checksum: Option<u16>,
    pub urgent_pointer: Option<u16>,
    /// Raw option region, present only when quoted in full.
    pub option_bytes: Option<Vec<u8>>,
    /// Payload, present only when the whole segment was quoted.
    pub payload: Option<Vec<u8>>,
}

/// A datagram prefix as carried in an ICMP error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartialSegment {
    pub ip: Ipv4Header,
    pub tcp: PartialTcp,
    raw: Vec<u8>,
}

impl PartialSegment {
    pub fn parse(bytes: &[u8]) -> Result<PartialSegment, SegmentError> {
        let (ip, ip_len) = Ipv4Header::parse(bytes)?;
        if ip.protocol != PROTO_TCP {
            return Err(SegmentError::NotTcp(ip.protocol));
        }
        let end = bytes.len().min(usize::from(ip.total_length).max(ip_len));
        let tcp = &bytes[ip_len..end];
        if tcp.len() < 8 {
            return Err(SegmentError::Truncated { needed: ip_len + 8, have: bytes.len() });
        }
        let be16 = |i: usize| (i + 2 <= tcp.len()).then(|| u16::from_be_bytes([tcp[i], tcp[i + 1]]));
        let be32 =
            |i: usize| (i + 4 <= tcp.len()).then(|| u32::from_be_bytes([tcp[i], tcp[i + 1], tcp[i + 2], tcp[i + 3]]));
        let data_offset = tcp.get(12).map(|b| b >> 4);
        if let Some(off) = data_offset {
            if off < 5 {
                return Err(SegmentError::BadDataOffset(off));
            }
        }
        let header_len = data_offset.map(|o| usize::from(o) * 4);
        let option_bytes = header_len.filter(|&len| len <= tcp.len()).map(|len| tcp[TCP_HEADER_LEN..len].to_vec());
        let complete = end == usize::from(ip.total_length) && end <= bytes.len();
        let payload = match header_len {
            Some(len) if complete && len <= tcp.len() => Some(tcp[len..].to_vec()),
            _ => None,
        };
        let parsed = PartialTcp {
            source_port: be16(0).unwrap_or_default(),
            dest_port: be16(2).unwrap_or_default(),
            seq: be32(4).unwrap_or_default(),
            ack: be32(8),
            data_offset,
            reserved: tcp.get(12).map(|b| b & 0x0f),
            flags: tcp.get(13).map(|b| TcpFlags::from_bits_retain(*b)),
            window: be16(14),
            checksum: be16(16),
            urgent_pointer: be16(18),
            option_bytes,
            payload,
        };
        Ok(PartialSegment { ip, tcp: parsed, raw: bytes[..end].to_vec() })
    }

    /// The bytes this quote was parsed from.
    pub fn raw(&self) -> &[u8] {
        &self.raw
    }

    pub fn options(&self) -> Option<Vec<TcpOption>> {
        self.tcp.option_bytes.as_deref().map(decode_options)
    }

    pub fn mss(&self) -> Option<Option<u16>> {
        self.options().map(|o| find_mss(&o))
    }

    pub fn is_complete(&self) -> bool {
        self.tcp.payload.is_some()
    }

    /// The full segment, when every byte was quoted.
    pub fn to_segment(&self) -> Option<Segment> {
        if !self.is_complete() {
            return None;
        }
        Segment::parse(&self.raw).ok()
    }

    /// Checksum status of the quoted segment; needs a complete quote.
    pub fn checksum_state(&self) -> Option<ChecksumState> {
        self.to_segment().map(|s| s.checksum_state())
    }
}

impl Serialize for PartialSegment {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&hex::encode(&self.raw))
    }
}

impl<'de> Deserialize<'de> for PartialSegment {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        let bytes = hex::decode(text).map_err(serde::de::Error::custom)?;
        PartialSegment::parse(&bytes).map_err(serde::de::Error::custom)
    }
}
