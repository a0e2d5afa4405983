use super::{internet_checksum, Ipv4Header, PartialSegment, SegmentError};

pub const ICMP_TIME_EXCEEDED: u8 = 11;
const ICMP_HEADER_LEN: usize = 8;
const MIN_QUOTE_LEN: usize = 28;

/// The datagram quoted by an ICMP time-exceeded message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpQuote {
    pub quote: PartialSegment,
    /// Number of quoted bytes (IP header included).
    pub quoted_len: usize,
}

/// Parses an ICMP message (starting at the ICMP type byte) and returns the
/// embedded segment in partial form.
pub fn parse_icmp_time_exceeded(bytes: &[u8]) -> Result<IcmpQuote, SegmentError> {
    if bytes.len() < ICMP_HEADER_LEN {
        return Err(SegmentError::Truncated { needed: ICMP_HEADER_LEN, have: bytes.len() });
    }
    let (kind, code) = (bytes[0], bytes[1]);
    if kind != ICMP_TIME_EXCEEDED || code != 0 {
        return Err(SegmentError::NotTimeExceeded { kind, code });
    }
    let quoted = &bytes[ICMP_HEADER_LEN..];
    if quoted.len() < MIN_QUOTE_LEN {
        return Err(SegmentError::TruncatedQuote(quoted.len()));
    }
    let quote = PartialSegment::parse(quoted)?;
    Ok(IcmpQuote { quote, quoted_len: quoted.len() })
}

/// Builds an ICMP time-exceeded (TTL expired in transit) message quoting
/// `quoted`.
pub fn build_icmp_time_exceeded(quoted: &[u8]) -> Vec<u8> {
    let mut msg = Vec::with_capacity(ICMP_HEADER_LEN + quoted.len());
    msg.extend_from_slice(&[ICMP_TIME_EXCEEDED, 0, 0, 0, 0, 0, 0, 0]);
    msg.extend_from_slice(quoted);
    let sum = internet_checksum(&msg);
    msg[2..4].copy_from_slice(&sum.to_be_bytes());
    msg
}

/// Splits a raw IPv4 datagram into its header and payload.
pub fn strip_ipv4_header(bytes: &[u8]) -> Result<(Ipv4Header, &[u8]), SegmentError> {
    let (header, len) = Ipv4Header::parse(bytes)?;
    let end = bytes.len().min(usize::from(header.total_length).max(len));
    Ok((header, &bytes[len..end]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segment::{Segment, TcpFlags, TcpOption};
    use std::net::{Ipv4Addr, SocketAddrV4};

    fn probe() -> Segment {
        Segment::new(
            SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, 1), 41000),
            SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 9), 443),
        )
        .with_flags(TcpFlags::SYN)
        .with_seq(12345)
        .with_options(vec![TcpOption::Mss(515)])
        .finalize()
    }

    #[test]
    fn full_quote_exposes_all_fields() {
        let bytes = probe().serialize().unwrap();
        let msg = build_icmp_time_exceeded(&bytes);
        assert_eq!(internet_checksum(&msg), 0);
        let q = parse_icmp_time_exceeded(&msg).unwrap();
        assert_eq!(q.quoted_len, bytes.len());
        assert_eq!(q.quote.to_segment().unwrap(), probe());
    }

    #[test]
    fn minimal_quote_exposes_ports_and_seq() {
        let bytes = probe().serialize().unwrap();
        let q = parse_icmp_time_exceeded(&build_icmp_time_exceeded(&bytes[..28])).unwrap();
        assert_eq!(q.quote.tcp.seq, 12345);
        assert_eq!(q.quote.tcp.dest_port, 443);
        assert_eq!(q.quote.tcp.ack, None);
        assert_eq!(q.quote.tcp.window, None);
    }

    #[test]
    fn destination_unreachable_rejected() {
        let bytes = probe().serialize().unwrap();
        let mut msg = build_icmp_time_exceeded(&bytes);
        msg[0] = 3;
        assert_eq!(parse_icmp_time_exceeded(&msg), Err(SegmentError::NotTimeExceeded { kind: 3, code: 0 }));
    }

    #[test]
    fn short_quote_rejected() {
        let bytes = probe().serialize().unwrap();
        let msg = build_icmp_time_exceeded(&bytes[..24]);
        assert_eq!(parse_icmp_time_exceeded(&msg), Err(SegmentError::TruncatedQuote(24)));
    }
}
