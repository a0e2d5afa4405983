//! Connection bookkeeping shared by the tests.

use std::collections::HashSet;
use std::net::Ipv4Addr;
use std::time::Duration;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::exchange::{Direction, FanRecord, Frame, Packet, ProbeExchange, Stage};
use super::SuiteConfig;
use crate::segment::{Segment, TcpFlags};
use crate::tracer::{Carriers, Fan};
use crate::transport::{Endpoint, EventKind, SessionHandle, Transport, TransportError};

const EPHEMERAL_FIRST: u16 = 32_768;
const EPHEMERAL_LAST: u16 = 60_999;

/// Hands out local ports so that no 4-tuple is used twice.
#[derive(Debug, Clone)]
pub struct PortAllocator {
    next: u16,
    used: HashSet<(u16, Endpoint)>,
}

impl PortAllocator {
    pub fn new(start: u16) -> PortAllocator {
        let span = EPHEMERAL_LAST - EPHEMERAL_FIRST + 1;
        PortAllocator { next: EPHEMERAL_FIRST + start % span, used: HashSet::new() }
    }

    /// A local port never used before towards `remote`.
    ///
    /// # Panics
    /// When every ephemeral port has been used for `remote`.
    pub fn allocate(&mut self, remote: Endpoint) -> u16 {
        let span = u32::from(EPHEMERAL_LAST - EPHEMERAL_FIRST) + 1;
        for _ in 0..span {
            let port = self.next;
            self.next = if port == EPHEMERAL_LAST { EPHEMERAL_FIRST } else { port + 1 };
            if self.used.insert((port, remote)) {
                return port;
            }
        }
        panic!("local ports towards {remote} exhausted");
    }
}

/// Client side of one probe connection.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Conn {
    pub handle: SessionHandle,
    pub local: Endpoint,
    pub stage: Stage,
    pub iss: u32,
    pub snd_nxt: u32,
    /// Next expected server sequence number, once a SYN/ACK arrived.
    pub rcv_nxt: Option<u32>,
}

pub(crate) struct Prober<'a, T: Transport> {
    pub t: &'a mut T,
    pub cfg: &'a SuiteConfig,
    pub local_addr: Ipv4Addr,
    pub target: Endpoint,
    pub ports: &'a mut PortAllocator,
    pub rng: &'a mut ChaCha8Rng,
    pub ex: ProbeExchange,
    sessions: Vec<SessionHandle>,
}

impl<'a, T: Transport> Prober<'a, T> {
    pub fn new(
        t: &'a mut T,
        cfg: &'a SuiteConfig,
        local_addr: Ipv4Addr,
        target: Endpoint,
        ports: &'a mut PortAllocator,
        rng: &'a mut ChaCha8Rng,
        ex: ProbeExchange,
    ) -> Self {
        Prober { t, cfg, local_addr, target, ports, rng, ex, sessions: Vec::new() }
    }

    pub fn open(&mut self, stage: Stage) -> Result<Conn, TransportError> {
        let local = Endpoint::new(self.local_addr, self.ports.allocate(self.target));
        let handle = self.t.open_session(local, self.target)?;
        self.sessions.push(handle);
        let iss: u32 = self.rng.gen();
        Ok(Conn { handle, local, stage, iss, snd_nxt: iss, rcv_nxt: None })
    }

    /// Reopens the session of an earlier connection for a later stage.
    pub fn reopen(&mut self, conn: &Conn, stage: Stage) -> Result<Conn, TransportError> {
        let handle = self.t.open_session(conn.local, self.target)?;
        self.sessions.push(handle);
        Ok(Conn { handle, stage, ..*conn })
    }

    pub fn close(&mut self, conn: &Conn) {
        self.t.close_session(conn.handle);
        self.sessions.retain(|h| *h != conn.handle);
    }

    pub fn now(&self) -> Duration {
        self.t.now()
    }

    pub fn deadline(&self) -> Duration {
        self.now() + self.cfg.reply_deadline()
    }

    /// A segment on `conn` with the connection's current sequence numbers.
    pub fn segment(&mut self, conn: &Conn, flags: TcpFlags) -> Segment {
        let mut s =
            Segment::new(conn.local, self.target).with_flags(flags).with_seq(conn.snd_nxt).with_id(self.rng.gen());
        if flags.contains(TcpFlags::ACK) {
            s = s.with_ack(conn.rcv_nxt.unwrap_or(0));
        }
        s
    }

    fn record(&mut self, at: Duration, stage: Stage, direction: Direction, packet: Packet) {
        self.ex.frames.push(Frame { at_us: at.as_micros() as u64, stage, direction, packet });
    }

    /// Sends a segment exactly as given.
    pub fn send(&mut self, conn: &Conn, segment: Segment) -> Result<Duration, TransportError> {
        let at = self.t.send(conn.handle, &segment)?;
        self.record(at, conn.stage, Direction::Sent, Packet::Tcp { segment, fan: false });
        Ok(at)
    }

    /// Sends the TTL-limited copies of `base`, if fans are enabled.
    pub fn send_fan(&mut self, conn: &Conn, base: &Segment, carriers: Carriers) -> Result<(), TransportError> {
        if !self.cfg.fan {
            return Ok(());
        }
        let fan = Fan::new(base, self.cfg.max_ttl, carriers);
        self.ex.fan = Some(FanRecord {
            stage: conn.stage,
            base: base.clone(),
            carriers: fan.carriers(),
            max_ttl: self.cfg.max_ttl,
        });
        for copy in fan.copies() {
            let at = self.t.send(conn.handle, copy)?;
            self.record(at, conn.stage, Direction::Sent, Packet::Tcp { segment: copy.clone(), fan: true });
        }
        Ok(())
    }

    /// Next TCP segment on `conn` before `deadline`; ICMP on the way is
    /// recorded and skipped.
    pub fn recv(&mut self, conn: &Conn, deadline: Duration) -> Result<Option<Segment>, TransportError> {
        loop {
            let ev = self.t.next_event(conn.handle, deadline)?;
            match ev.kind {
                EventKind::Tcp(segment) => {
                    self.record(
                        ev.at,
                        conn.stage,
                        Direction::Received,
                        Packet::Tcp { segment: segment.clone(), fan: false },
                    );
                    return Ok(Some(segment));
                }
                EventKind::Icmp { bytes, source } => {
                    self.record(
                        ev.at,
                        conn.stage,
                        Direction::Received,
                        Packet::Icmp { source, bytes: hex::encode(bytes) },
                    );
                }
                EventKind::Timeout => return Ok(None),
            }
        }
    }

    /// Records everything that arrives on `conn` until `until`.
    pub fn collect(&mut self, conn: &Conn, until: Duration) -> Result<(), TransportError> {
        while self.recv(conn, until)?.is_some() {}
        Ok(())
    }

    /// Sends `syn` (plus its fan) and waits for the matching SYN/ACK. A
    /// RST or the deadline ends the wait. When a fan went out, the answers
    /// to the copies are awaited for the settle time before returning.
    pub fn handshake_syn(
        &mut self,
        conn: &mut Conn,
        syn: Segment,
        fan: Option<Carriers>,
    ) -> Result<Option<Segment>, TransportError> {
        conn.snd_nxt = syn.tcp.seq.wrapping_add(1);
        self.send(conn, syn.clone())?;
        if let Some(carriers) = fan {
            self.send_fan(conn, &syn, carriers)?;
        }
        let deadline = self.deadline();
        let expected_ack = syn.tcp.seq.wrapping_add(1);
        let synack = loop {
            match self.recv(conn, deadline)? {
                Some(s) if s.is_syn_ack() && s.tcp.ack == expected_ack => break Some(s),
                Some(s) if s.is(TcpFlags::RST) => break None,
                Some(_) => continue,
                None => break None,
            }
        };
        if let Some(s) = &synack {
            conn.rcv_nxt = Some(s.tcp.seq.wrapping_add(1));
            if fan.is_some() && self.cfg.fan {
                let until = self.now() + self.cfg.settle();
                self.collect(conn, until)?;
            }
        }
        Ok(synack)
    }

    /// Plain SYN, SYN/ACK, ACK.
    pub fn connect(&mut self, conn: &mut Conn) -> Result<bool, TransportError> {
        let syn = self.segment(conn, TcpFlags::SYN).finalize();
        if self.handshake_syn(conn, syn, None)?.is_none() {
            return Ok(false);
        }
        let ack = self.segment(conn, TcpFlags::ACK).finalize();
        self.send(conn, ack)?;
        Ok(true)
    }

    /// Resets a connection that got as far as a SYN/ACK.
    pub fn reset(&mut self, conn: &Conn) -> Result<(), TransportError> {
        if conn.rcv_nxt.is_some() {
            let rst = self.segment(conn, TcpFlags::RST).finalize();
            self.send(conn, rst)?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> ProbeExchange {
        for h in std::mem::take(&mut self.sessions) {
            self.t.close_session(h);
        }
        self.ex
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ports_never_repeat_per_remote() {
        let remote = Endpoint::new(Ipv4Addr::new(192, 0, 2, 1), 80);
        let other = Endpoint::new(Ipv4Addr::new(192, 0, 2, 2), 80);
        let mut p = PortAllocator::new(60_999 - EPHEMERAL_FIRST);
        let a = p.allocate(remote);
        assert_eq!(a, EPHEMERAL_LAST);
        assert_eq!(p.allocate(remote), EPHEMERAL_FIRST);
        let mut seen = HashSet::new();
        seen.insert(a);
        seen.insert(EPHEMERAL_FIRST);
        for _ in 0..1000 {
            assert!(seen.insert(p.allocate(remote)));
        }
        assert!(p.allocate(other) >= EPHEMERAL_FIRST);
    }
}
