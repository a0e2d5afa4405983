use super::SegmentError;

pub const KIND_EOOL: u8 = 0;
pub const KIND_NOOP: u8 = 1;
pub const KIND_MSS: u8 = 2;

/// Maximum number of option bytes a TCP header can carry.
pub const MAX_OPTIONS_LEN: usize = 40;

/// A single TCP option as it appears on the wire.
///
/// Everything that is not end-of-list, no-op or a well-formed MSS is carried
/// opaquely. `Malformed` holds the remainder of an option region whose
/// length byte could not be honored; parsing stops there.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum TcpOption {
    Eool,
    Noop,
    Mss(u16),
    Unknown { kind: u8, data: Vec<u8> },
    Malformed(Vec<u8>),
}

impl TcpOption {
    pub fn kind(&self) -> Option<u8> {
        match self {
            TcpOption::Eool => Some(KIND_EOOL),
            TcpOption::Noop => Some(KIND_NOOP),
            TcpOption::Mss(_) => Some(KIND_MSS),
            TcpOption::Unknown { kind, .. } => Some(*kind),
            TcpOption::Malformed(_) => None,
        }
    }

    pub fn wire_len(&self) -> usize {
        match self {
            TcpOption::Eool | TcpOption::Noop => 1,
            TcpOption::Mss(_) => 4,
            TcpOption::Unknown { data, .. } => 2 + data.len(),
            TcpOption::Malformed(bytes) => bytes.len(),
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            TcpOption::Eool => out.push(KIND_EOOL),
            TcpOption::Noop => out.push(KIND_NOOP),
            TcpOption::Mss(value) => {
                out.extend_from_slice(&[KIND_MSS, 4]);
                out.extend_from_slice(&value.to_be_bytes());
            }
            TcpOption::Unknown { kind, data } => {
                out.push(*kind);
                out.push((2 + data.len()) as u8);
                out.extend_from_slice(data);
            }
            TcpOption::Malformed(bytes) => out.extend_from_slice(bytes),
        }
    }
}

/// Unpadded length of an option list.
pub fn options_len(options: &[TcpOption]) -> usize {
    options.iter().map(TcpOption::wire_len).sum()
}

/// Serializes options and zero-pads them to a 4-byte boundary.
pub fn encode_options(options: &[TcpOption]) -> Result<Vec<u8>, SegmentError> {
    let padded = encode_options_lossy(options);
    if padded.len() > MAX_OPTIONS_LEN {
        return Err(SegmentError::OversizeOptions(options_len(options)));
    }
    Ok(padded)
}

/// Same as [`encode_options`] without the 40-byte limit.
pub(crate) fn encode_options_lossy(options: &[TcpOption]) -> Vec<u8> {
    let mut out = Vec::with_capacity(options_len(options) + 3);
    for option in options {
        option.write(&mut out);
    }
    while out.len() % 4 != 0 {
        out.push(KIND_EOOL);
    }
    out
}

/// Parses an option region. End-of-list terminates parsing and is kept in
/// the list; the bytes after it are padding.
pub fn decode_options(mut bytes: &[u8]) -> Vec<TcpOption> {
    let mut options = Vec::new();
    while let Some(&kind) = bytes.first() {
        match kind {
            KIND_EOOL => {
                options.push(TcpOption::Eool);
                break;
            }
            KIND_NOOP => {
                options.push(TcpOption::Noop);
                bytes = &bytes[1..];
            }
            _ => {
                let len = bytes.get(1).copied().map(usize::from);
                match len {
                    Some(len) if len >= 2 && len <= bytes.len() => {
                        let data = &bytes[2..len];
                        if kind == KIND_MSS && len == 4 {
                            options.push(TcpOption::Mss(u16::from_be_bytes([data[0], data[1]])));
                        } else {
                            options.push(TcpOption::Unknown { kind, data: data.to_vec() });
                        }
                        bytes = &bytes[len..];
                    }
                    _ => {
                        options.push(TcpOption::Malformed(bytes.to_vec()));
                        break;
                    }
                }
            }
        }
    }
    options
}

/// First MSS option in the list, if any.
pub fn find_mss(options: &[TcpOption]) -> Option<u16> {
    options.iter().find_map(|o| match o {
        TcpOption::Mss(v) => Some(*v),
        _ => None,
    })
}

/// Whether an option kind is assigned by IANA. Kind 158 is not.
pub fn is_assigned_kind(kind: u8) -> bool {
    matches!(kind, 0..=30 | 34 | 69 | 253 | 254)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mss_wire_format() {
        assert_eq!(encode_options(&[TcpOption::Mss(515)]).unwrap(), vec![2, 4, 0x02, 0x03]);
    }

    #[test]
    fn noop_noop_eool_padded() {
        let opts = [TcpOption::Noop, TcpOption::Noop, TcpOption::Eool];
        let bytes = encode_options(&opts).unwrap();
        assert_eq!(bytes, vec![1, 1, 0, 0]);
        assert_eq!(decode_options(&bytes), opts.to_vec());
    }

    #[test]
    fn eool_terminates_parsing() {
        let bytes = [1, 0, 2, 4, 5, 0xb4];
        assert_eq!(decode_options(&bytes), vec![TcpOption::Noop, TcpOption::Eool]);
    }

    #[test]
    fn unknown_kind_preserved() {
        let bytes = [158, 4, 0xde, 0xad];
        assert_eq!(decode_options(&bytes), vec![TcpOption::Unknown { kind: 158, data: vec![0xde, 0xad] }]);
        assert!(!is_assigned_kind(158));
    }

    #[test]
    fn bad_length_is_malformed() {
        let bytes = [8, 12, 0, 0];
        assert_eq!(decode_options(&bytes), vec![TcpOption::Malformed(bytes.to_vec())]);
        let bytes = [8, 1, 0, 0];
        assert_eq!(decode_options(&bytes), vec![TcpOption::Malformed(bytes.to_vec())]);
    }

    #[test]
    fn forty_one_noops_rejected() {
        let opts = vec![TcpOption::Noop; 41];
        assert!(matches!(encode_options(&opts), Err(SegmentError::OversizeOptions(41))));
        assert!(encode_options(&vec![TcpOption::Noop; 40]).is_ok());
    }
}
