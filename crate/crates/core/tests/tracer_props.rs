use std::net::{Ipv4Addr, SocketAddrV4};

use mustprobe::segment::{PartialSegment, Segment, TcpFlags, TcpOption};
use mustprobe::tracer::{decode_ttl, encode_ttl, pack16, pack32, Carriers};
use proptest::prelude::*;

const SINGLE: [Carriers; 5] =
    [Carriers::IPV4_ID, Carriers::ACK_NUM, Carriers::WINDOW, Carriers::URGENT_PTR, Carriers::NOOP_COUNT];

fn base() -> Segment {
    Segment::new(
        SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, 1), 40000),
        SocketAddrV4::new(Ipv4Addr::new(203, 0, 113, 9), 80),
    )
    .with_flags(TcpFlags::SYN)
    .with_seq(0x1234_5678)
}

fn encoded(value: u8, carriers: Carriers) -> Segment {
    let mut s = base();
    encode_ttl(value, carriers).unwrap().apply(&mut s);
    s.finalize()
}

fn quote(s: &Segment) -> PartialSegment {
    PartialSegment::parse(&s.serialize().unwrap()).unwrap()
}

/// A 5-bit value repeated `copies` times with nothing above, the only shape
/// that decodes as a valid reading.
fn is_encoding(word: u32, copies: u32) -> bool {
    let v = word & 0x1f;
    (1..=30).contains(&v) && (0..copies).fold(0u32, |acc, i| acc | (v << (5 * i))) == word
}

#[test]
fn exhaustive_clean_decode() {
    let mut cases = 0;
    for bits in 1..32u8 {
        let carriers = Carriers::from_bits(bits).unwrap();
        for v in 1..=30 {
            let d = decode_ttl(&quote(&encoded(v, carriers)), carriers).unwrap();
            assert_eq!(d.value, Some(v), "{carriers:?} {v}");
            assert_eq!(d.confidence, 1.0);
            cases += 1;
        }
    }
    assert_eq!(cases, 31 * 30);
}

#[test]
fn pack_layout() {
    assert_eq!(pack16(1), 0b0_00001_00001_00001);
    assert_eq!(pack32(1), 0x0210_8421);
    assert_eq!(pack16(30) >> 15, 0);
    assert_eq!(pack32(30) >> 30, 0);
}

fn carrier_set() -> impl Strategy<Value = Carriers> {
    (1u8..32)
        .prop_map(|b| Carriers::from_bits(b).unwrap())
        .prop_filter("at least two carriers", |c| c.iter().count() >= 2)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn survives_one_corrupted_carrier(
        v in 1u8..=30,
        carriers in carrier_set(),
        pick in any::<prop::sample::Index>(),
        junk in any::<u32>(),
        noops in 0usize..=30,
    ) {
        let present: Vec<Carriers> = SINGLE.into_iter().filter(|c| carriers.contains(*c)).collect();
        let victim = present[pick.index(present.len())];
        let mut s = encoded(v, carriers);
        match victim {
            Carriers::IPV4_ID => {
                prop_assume!(!is_encoding(junk & 0xffff, 3) && junk as u16 != s.ip.identification);
                s.ip.identification = junk as u16;
            }
            Carriers::ACK_NUM => {
                prop_assume!(!is_encoding(junk, 6) && junk != s.tcp.ack);
                s.tcp.ack = junk;
            }
            Carriers::WINDOW => {
                prop_assume!(!is_encoding(junk & 0xffff, 3) && junk as u16 != s.tcp.window);
                s.tcp.window = junk as u16;
            }
            Carriers::URGENT_PTR => {
                prop_assume!(!is_encoding(junk & 0xffff, 3) && junk as u16 != s.tcp.urgent_pointer);
                s.tcp.urgent_pointer = junk as u16;
            }
            _ => {
                prop_assume!(noops != usize::from(v));
                s.tcp.options = vec![TcpOption::Noop; noops];
            }
        }
        let d = decode_ttl(&quote(&s.finalize()), carriers).unwrap();
        prop_assert_eq!(d.value, Some(v));
        prop_assert!(d.confidence < 1.0);
    }
}
