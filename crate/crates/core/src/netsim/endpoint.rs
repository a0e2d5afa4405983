//! Simulated TCP responder.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::profile::{Deviations, StackProfile};
use crate::segment::{is_assigned_kind, seq_ge, ChecksumState, Segment, TcpFlags, TcpOption};
use crate::transport::Endpoint;

/// First SYN/ACK retransmission timeout; doubles per attempt.
pub const INITIAL_RTO: Duration = Duration::from_secs(1);
pub const MAX_SYNACK_RETRIES: u32 = 3;
const WINDOW: u16 = 65_535;

/// Connection key: the peer and the local port.
pub type ConnKey = (Endpoint, u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnState {
    SynReceived,
    Established,
}

#[derive(Debug, Clone)]
struct Conn {
    id: u64,
    state: ConnState,
    iss: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    eff_mss: u16,
    served: bool,
    synack: Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timer {
    SynAckRetransmit { key: ConnKey, conn: u64, attempt: u32 },
    Restart,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Output {
    Send(Segment),
    /// Fire `timer` after the given delay.
    Arm(Duration, Timer),
}

/// One host's TCP stack.
#[derive(Debug)]
pub struct EndpointStack {
    addr: Ipv4Addr,
    ports: Vec<u16>,
    profile: StackProfile,
    conns: BTreeMap<ConnKey, Conn>,
    next_conn: u64,
    next_ip_id: u16,
    dead: bool,
    crashes: u32,
    rng: ChaCha8Rng,
}

impl EndpointStack {
    pub fn new(addr: Ipv4Addr, ports: Vec<u16>, profile: StackProfile, seed: u64) -> EndpointStack {
        EndpointStack {
            addr,
            ports,
            profile,
            conns: BTreeMap::new(),
            next_conn: 0,
            next_ip_id: 1,
            dead: false,
            crashes: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn profile(&self) -> &StackProfile {
        &self.profile
    }

    pub fn is_dead(&self) -> bool {
        self.dead
    }

    pub fn crashes(&self) -> u32 {
        self.crashes
    }

    pub fn conn_state(&self, peer: Endpoint, port: u16) -> Option<ConnState> {
        self.conns.get(&(peer, port)).map(|c| c.state)
    }

    fn reply(&mut self, to: &Segment) -> Segment {
        let id = self.next_ip_id;
        self.next_ip_id = self.next_ip_id.wrapping_add(1);
        Segment::new(to.destination(), to.source()).with_id(id).with_window(WINDOW)
    }

    fn reset_for(&mut self, seg: &Segment) -> Segment {
        let r = self.reply(seg);
        if seg.is(TcpFlags::ACK) {
            r.with_flags(TcpFlags::RST).with_seq(seg.tcp.ack).finalize()
        } else {
            r.with_flags(TcpFlags::RST | TcpFlags::ACK).with_ack(seg.tcp.seq.wrapping_add(seg.seq_len())).finalize()
        }
    }

    fn ack_for(&mut self, key: ConnKey) -> Option<Segment> {
        let c = self.conns.get(&key)?.clone();
        let probe = Segment::new(key.0, Endpoint::new(self.addr, key.1));
        Some(self.reply(&probe).with_flags(TcpFlags::ACK).with_seq(c.snd_nxt).with_ack(c.rcv_nxt).finalize())
    }

    fn crash(&mut self) -> Vec<Output> {
        self.dead = true;
        self.crashes += 1;
        self.conns.clear();
        if self.profile.restart_after_crash {
            vec![Output::Arm(self.profile.restart_delay, Timer::Restart)]
        } else {
            Vec::new()
        }
    }

    /// Processes one segment addressed to this host.
    pub fn on_segment(&mut self, seg: &Segment) -> Vec<Output> {
        if self.dead {
            return Vec::new();
        }
        if seg.checksum_state() != ChecksumState::Valid && !self.profile.has(Deviations::IGNORE_BAD_CHECKSUM) {
            return Vec::new();
        }
        if seg.is(TcpFlags::RST) {
            let key = (seg.source(), seg.tcp.dest_port);
            if let Some(c) = self.conns.get(&key) {
                let offset = seg.tcp.seq.wrapping_sub(c.rcv_nxt);
                if offset < u32::from(WINDOW) {
                    self.conns.remove(&key);
                }
            }
            return Vec::new();
        }
        if !self.ports.contains(&seg.tcp.dest_port) {
            return vec![Output::Send(self.reset_for(seg))];
        }
        let key = (seg.source(), seg.tcp.dest_port);
        if seg.is(TcpFlags::SYN) && !seg.is(TcpFlags::ACK) {
            return self.on_syn(key, seg);
        }
        if !seg.is(TcpFlags::ACK) {
            return Vec::new();
        }
        let Some(conn) = self.conns.get(&key).cloned() else {
            return vec![Output::Send(self.reset_for(seg))];
        };
        if conn.state == ConnState::SynReceived {
            if seg.tcp.ack != conn.iss.wrapping_add(1) {
                return vec![Output::Send(self.reset_for(seg))];
            }
            if seg.payload.is_empty() && self.profile.has(Deviations::DEFER_ACCEPT) {
                return Vec::new();
            }
            if let Some(c) = self.conns.get_mut(&key) {
                c.state = ConnState::Established;
            }
        }
        self.on_established(key, seg)
    }

    fn on_syn(&mut self, key: ConnKey, seg: &Segment) -> Vec<Output> {
        if let Some(c) = self.conns.get(&key) {
            return if c.state == ConnState::SynReceived && c.rcv_nxt == seg.tcp.seq.wrapping_add(1) {
                vec![Output::Send(c.synack.clone())]
            } else {
                self.ack_for(key).map(Output::Send).into_iter().collect()
            };
        }
        let p = &self.profile;
        if p.has(Deviations::DROP_RESERVED_SYN) && seg.tcp.reserved != 0 {
            return Vec::new();
        }
        let unknown = |o: &TcpOption| matches!(o, TcpOption::Unknown { kind, .. } if !is_assigned_kind(*kind));
        if p.has(Deviations::DROP_UNKNOWN_OPTION) && seg.tcp.options.iter().any(unknown) {
            return Vec::new();
        }
        if p.has(Deviations::RST_ON_OPTIONS) && seg.tcp.options.contains(&TcpOption::Eool) {
            return vec![Output::Send(self.reset_for(seg))];
        }
        let eff_mss = p.effective_mss(seg.tcp.mss());
        let reserved = if p.has(Deviations::ECHO_RESERVED_BITS) { seg.tcp.reserved } else { 0 };
        let local_mss = p.local_mss;
        let iss: u32 = self.rng.gen();
        let mut synack = self
            .reply(seg)
            .with_flags(TcpFlags::SYN | TcpFlags::ACK)
            .with_seq(iss)
            .with_ack(seg.tcp.seq.wrapping_add(1))
            .with_options(vec![TcpOption::Mss(local_mss)]);
        synack.tcp.reserved = reserved;
        let synack = synack.finalize();
        self.next_conn += 1;
        let id = self.next_conn;
        self.conns.insert(
            key,
            Conn {
                id,
                state: ConnState::SynReceived,
                iss,
                snd_nxt: iss.wrapping_add(1),
                rcv_nxt: seg.tcp.seq.wrapping_add(1),
                eff_mss,
                served: false,
                synack: synack.clone(),
            },
        );
        vec![Output::Send(synack), Output::Arm(INITIAL_RTO, Timer::SynAckRetransmit { key, conn: id, attempt: 1 })]
    }

    fn on_established(&mut self, key: ConnKey, seg: &Segment) -> Vec<Output> {
        let conn = self.conns[&key].clone();
        if seg.is(TcpFlags::URG) && !seg.payload.is_empty() {
            if self.profile.has(Deviations::CRASH_ON_URGENT) {
                return self.crash();
            }
            if self.profile.has(Deviations::DROP_URGENT_SILENTLY) {
                return Vec::new();
            }
            if self.profile.has(Deviations::RST_ON_URGENT) {
                self.conns.remove(&key);
                let r = self
                    .reply(seg)
                    .with_flags(TcpFlags::RST | TcpFlags::ACK)
                    .with_seq(conn.snd_nxt)
                    .with_ack(conn.rcv_nxt)
                    .finalize();
                return vec![Output::Send(r)];
            }
        }
        let len = seg.payload.len() as u32 + u32::from(seg.is(TcpFlags::FIN));
        if len == 0 {
            let offset = seg.tcp.seq.wrapping_sub(conn.rcv_nxt);
            return if offset < u32::from(WINDOW) {
                Vec::new()
            } else {
                self.ack_for(key).map(Output::Send).into_iter().collect()
            };
        }
        let end = seg.tcp.seq.wrapping_add(len);
        let in_order = seq_ge(conn.rcv_nxt, seg.tcp.seq) && !seq_ge(conn.rcv_nxt, end);
        let mut out = Vec::new();
        if in_order {
            let c = self.conns.get_mut(&key).expect("connection present");
            c.rcv_nxt = end;
        }
        out.extend(self.ack_for(key).map(Output::Send));
        if in_order && seg.is(TcpFlags::PSH) && !conn.served && !seg.payload.is_empty() {
            out.extend(self.serve(key, seg).into_iter().map(Output::Send));
        }
        out
    }

    fn serve(&mut self, key: ConnKey, seg: &Segment) -> Vec<Segment> {
        let body = response_body(self.profile.response_body_len);
        let conn = self.conns.get_mut(&key).expect("connection present");
        conn.served = true;
        let (mss, rcv_nxt) = (usize::from(conn.eff_mss), conn.rcv_nxt);
        let mut seq = conn.snd_nxt;
        conn.snd_nxt = conn.snd_nxt.wrapping_add(body.len() as u32);
        let chunks: Vec<Vec<u8>> = body.chunks(mss).map(<[u8]>::to_vec).collect();
        let n = chunks.len();
        chunks
            .into_iter()
            .enumerate()
            .map(|(i, chunk)| {
                let mut flags = TcpFlags::ACK;
                if i + 1 == n {
                    flags |= TcpFlags::PSH;
                }
                let len = chunk.len() as u32;
                let s =
                    self.reply(seg).with_flags(flags).with_seq(seq).with_ack(rcv_nxt).with_payload(chunk).finalize();
                seq = seq.wrapping_add(len);
                s
            })
            .collect()
    }

    pub fn on_timer(&mut self, timer: Timer) -> Vec<Output> {
        match timer {
            Timer::Restart => {
                self.dead = false;
                self.conns.clear();
                Vec::new()
            }
            Timer::SynAckRetransmit { key, conn, attempt } => {
                if self.dead {
                    return Vec::new();
                }
                match self.conns.get(&key) {
                    Some(c) if c.id == conn && c.state == ConnState::SynReceived => {
                        let mut out = vec![Output::Send(c.synack.clone())];
                        if attempt < MAX_SYNACK_RETRIES {
                            out.push(Output::Arm(
                                INITIAL_RTO * 2u32.pow(attempt),
                                Timer::SynAckRetransmit { key, conn, attempt: attempt + 1 },
                            ));
                        }
                        out
                    }
                    _ => Vec::new(),
                }
            }
        }
    }
}

/// Body served in answer to a request: a status line padded to `len`.
pub fn response_body(len: usize) -> Vec<u8> {
    let mut body = b"HTTP/1.1 200 OK\r\nContent-Type: text/plain\r\n\r\n".to_vec();
    body.resize(len, b'.');
    body.truncate(len);
    body
}

#[cfg(test)]
mod tests {
    use super::*;

    const SERVER: Ipv4Addr = Ipv4Addr::new(203, 0, 113, 9);

    fn client() -> Endpoint {
        Endpoint::new(Ipv4Addr::new(198, 51, 100, 1), 40000)
    }

    fn stack(deviations: Deviations) -> EndpointStack {
        EndpointStack::new(SERVER, vec![80], StackProfile::conformant("t").with_deviations(deviations), 1)
    }

    fn to_server() -> Segment {
        Segment::new(client(), Endpoint::new(SERVER, 80))
    }

    fn sent(out: &[Output]) -> Vec<&Segment> {
        out.iter()
            .filter_map(|o| match o {
                Output::Send(s) => Some(s),
                Output::Arm(..) => None,
            })
            .collect()
    }

    fn handshake(ep: &mut EndpointStack, mss: Option<u16>) -> Segment {
        let mut syn = to_server().with_flags(TcpFlags::SYN).with_seq(100);
        if let Some(m) = mss {
            syn = syn.with_options(vec![TcpOption::Mss(m)]);
        }
        let out = ep.on_segment(&syn.finalize());
        let synack = sent(&out)[0].clone();
        assert!(synack.is_syn_ack());
        let ack =
            to_server().with_flags(TcpFlags::ACK).with_seq(101).with_ack(synack.tcp.seq.wrapping_add(1)).finalize();
        assert!(ep.on_segment(&ack).is_empty());
        synack
    }

    fn request(ep: &mut EndpointStack, synack: &Segment) -> Vec<Output> {
        let req = to_server()
            .with_flags(TcpFlags::ACK | TcpFlags::PSH)
            .with_seq(101)
            .with_ack(synack.tcp.seq.wrapping_add(1))
            .with_payload(b"GET / HTTP/1.1\r\n\r\n".to_vec())
            .finalize();
        ep.on_segment(&req)
    }

    #[test]
    fn body_segmented_by_advertised_mss() {
        let mut ep = stack(Deviations::empty());
        let synack = handshake(&mut ep, Some(515));
        let out = request(&mut ep, &synack);
        let data: Vec<_> = sent(&out).into_iter().filter(|s| !s.payload.is_empty()).collect();
        assert_eq!(data.len(), 4);
        assert!(data.iter().all(|s| s.payload.len() <= 515));
        assert_eq!(data.iter().map(|s| s.payload.len()).sum::<usize>(), 2000);
    }

    #[test]
    fn mss_floor_raises_small_mss() {
        let mut ep = stack(Deviations::MSS_FLOOR_536);
        let synack = handshake(&mut ep, Some(515));
        let out = request(&mut ep, &synack);
        assert!(sent(&out).iter().any(|s| s.payload.len() == 536));
    }

    #[test]
    fn bad_checksum_dropped_unless_ignored() {
        let mut syn = to_server().with_flags(TcpFlags::SYN).finalize();
        syn.tcp.checksum ^= 0x00ff;
        assert!(stack(Deviations::empty()).on_segment(&syn).is_empty());
        let out = stack(Deviations::IGNORE_BAD_CHECKSUM).on_segment(&syn);
        assert!(sent(&out)[0].is_syn_ack());
    }

    #[test]
    fn closed_port_resets() {
        let mut ep = stack(Deviations::empty());
        let syn = Segment::new(client(), Endpoint::new(SERVER, 81)).with_flags(TcpFlags::SYN).finalize();
        let out = ep.on_segment(&syn);
        assert!(sent(&out)[0].is(TcpFlags::RST));
    }

    #[test]
    fn defer_accept_waits_for_data() {
        let mut ep = stack(Deviations::DEFER_ACCEPT);
        let synack = handshake(&mut ep, None);
        assert_eq!(ep.conn_state(client(), 80), Some(ConnState::SynReceived));
        let timer = Timer::SynAckRetransmit { key: (client(), 80), conn: 1, attempt: 1 };
        let out = ep.on_timer(timer);
        assert_eq!(sent(&out)[0], &synack);
        assert!(matches!(out[1], Output::Arm(d, _) if d == Duration::from_secs(2)));
    }

    #[test]
    fn conformant_established_after_ack() {
        let mut ep = stack(Deviations::empty());
        handshake(&mut ep, None);
        assert_eq!(ep.conn_state(client(), 80), Some(ConnState::Established));
        let timer = Timer::SynAckRetransmit { key: (client(), 80), conn: 1, attempt: 1 };
        assert!(ep.on_timer(timer).is_empty());
    }

    #[test]
    fn crash_and_restart() {
        let mut profile = StackProfile::named("uip").unwrap();
        profile.restart_after_crash = true;
        let mut ep = EndpointStack::new(SERVER, vec![80], profile, 1);
        let synack = handshake(&mut ep, None);
        let urg = to_server()
            .with_flags(TcpFlags::ACK | TcpFlags::URG)
            .with_seq(101)
            .with_ack(synack.tcp.seq.wrapping_add(1))
            .with_payload(vec![0; 167])
            .finalize();
        let out = ep.on_segment(&urg);
        assert!(ep.is_dead());
        assert_eq!(out, vec![Output::Arm(Duration::from_millis(100), Timer::Restart)]);
        ep.on_timer(Timer::Restart);
        assert!(!ep.is_dead());
        assert_eq!(ep.conn_state(client(), 80), None);
    }

    #[test]
    fn reserved_echo() {
        let mut syn = to_server().with_flags(TcpFlags::SYN);
        syn.tcp.reserved = 0b0100;
        let syn = syn.finalize();
        assert_eq!(sent(&stack(Deviations::empty()).on_segment(&syn))[0].tcp.reserved, 0);
        assert_eq!(sent(&stack(Deviations::ECHO_RESERVED_BITS).on_segment(&syn))[0].tcp.reserved, 0b0100);
        assert!(stack(Deviations::DROP_RESERVED_SYN).on_segment(&syn).is_empty());
    }
}
