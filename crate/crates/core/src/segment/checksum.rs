//! Ones-complement internet checksum (RFC 1071) over IPv4 and TCP.

use super::{Ipv4Header, Segment};

/// Running ones-complement sum. Words are added as 16-bit big-endian
/// quantities; carries are folded only when the value is finished.
#[derive(Debug, Default, Clone, Copy)]
pub struct Accumulator {
    sum: u64,
    // a dangling high byte from an odd-length slice
    pending: Option<u8>,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_u16(&mut self, word: u16) {
        debug_assert!(self.pending.is_none(), "word added after odd-length slice");
        self.sum += u64::from(word);
    }

    pub fn add_u32(&mut self, word: u32) {
        self.add_u16((word >> 16) as u16);
        self.add_u16(word as u16);
    }

    pub fn add_bytes(&mut self, bytes: &[u8]) {
        let mut rest = bytes;
        if let Some(high) = self.pending.take() {
            match rest.split_first() {
                Some((low, tail)) => {
                    self.sum += u64::from(u16::from_be_bytes([high, *low]));
                    rest = tail;
                }
                None => {
                    self.pending = Some(high);
                    return;
                }
            }
        }
        let mut chunks = rest.chunks_exact(2);
        for pair in &mut chunks {
            self.sum += u64::from(u16::from_be_bytes([pair[0], pair[1]]));
        }
        if let [last] = chunks.remainder() {
            self.pending = Some(*last);
        }
    }

    /// Folds carries and returns the ones-complement of the sum.
    pub fn finish(mut self) -> u16 {
        if let Some(high) = self.pending.take() {
            self.sum += u64::from(high) << 8;
        }
        let mut sum = self.sum;
        while sum >> 16 != 0 {
            sum = (sum & 0xffff) + (sum >> 16);
        }
        !(sum as u16)
    }
}

/// Plain internet checksum of a byte slice.
pub fn internet_checksum(bytes: &[u8]) -> u16 {
    let mut acc = Accumulator::new();
    acc.add_bytes(bytes);
    acc.finish()
}

pub fn ipv4_header_checksum(ip: &Ipv4Header) -> u16 {
    let mut acc = Accumulator::new();
    acc.add_u16(0x4500 | u16::from(ip.tos));
    acc.add_u16(ip.total_length);
    acc.add_u16(ip.identification);
    acc.add_u16(ip.flags_fragment);
    acc.add_u16(u16::from_be_bytes([ip.ttl, ip.protocol]));
    acc.add_u32(u32::from(ip.source_addr));
    acc.add_u32(u32::from(ip.dest_addr));
    acc.finish()
}

/// TCP checksum over the pseudo-header, the TCP header (checksum field taken
/// as zero) and the payload. Computed from the structured fields rather than
/// from serialized bytes. A result of zero is emitted as 0xFFFF, so a zero
/// checksum field on the wire is never valid.
pub fn compute_tcp_checksum(segment: &Segment) -> u16 {
    let tcp = &segment.tcp;
    let options = super::options::encode_options_lossy(&tcp.options);
    let header_len = 20 + options.len();
    let tcp_len = header_len + segment.payload.len();

    let mut acc = Accumulator::new();
    acc.add_u32(u32::from(segment.ip.source_addr));
    acc.add_u32(u32::from(segment.ip.dest_addr));
    acc.add_u16(u16::from(segment.ip.protocol));
    acc.add_u16(tcp_len as u16);

    acc.add_u16(tcp.source_port);
    acc.add_u16(tcp.dest_port);
    acc.add_u32(tcp.seq);
    acc.add_u32(tcp.ack);
    let offset_word =
        ((header_len as u16 / 4) << 12) | (u16::from(tcp.reserved & 0x0f) << 8) | u16::from(tcp.flags.bits());
    acc.add_u16(offset_word);
    acc.add_u16(tcp.window);
    acc.add_u16(tcp.urgent_pointer);
    acc.add_bytes(&options);
    acc.add_bytes(&segment.payload);

    match acc.finish() {
        0 => 0xffff,
        sum => sum,
    }
}

pub fn verify_tcp_checksum(segment: &Segment) -> bool {
    segment.tcp.checksum == compute_tcp_checksum(segment)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rfc1071_worked_example() {
        // RFC 1071 section 3: sum of 0001 f203 f4f5 f6f7 is 0xddf2 after folding
        let bytes = [0x00, 0x01, 0xf2, 0x03, 0xf4, 0xf5, 0xf6, 0xf7];
        assert_eq!(internet_checksum(&bytes), !0xddf2);
    }

    #[test]
    fn odd_length_split_matches_contiguous() {
        let data: Vec<u8> = (0..37u8).map(|b| b.wrapping_mul(71)).collect();
        let mut split = Accumulator::new();
        split.add_bytes(&data[..5]);
        split.add_bytes(&data[5..18]);
        split.add_bytes(&data[18..]);
        assert_eq!(split.finish(), internet_checksum(&data));
    }

    #[test]
    fn empty_input_is_all_ones() {
        assert_eq!(internet_checksum(&[]), 0xffff);
    }
}
