//! Virtual-time network joining the scanner to simulated hosts.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::net::Ipv4Addr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::endpoint::{EndpointStack, Output, Timer};
use super::middlebox::{MiddleboxSpec, NatTable, QuoteLen};
use super::topology::{HostSpec, TopologyError, TopologySpec, CLIENT_ADDR};
use crate::segment::{build_icmp_time_exceeded, Segment, DEFAULT_TTL};
use crate::transport::{
    ChannelEvent, Demux, Endpoint, EventKind, Pacer, PacerConfig, SessionHandle, Transport, TransportError,
};

/// Bytes a minimal router quote keeps: IP header plus 8 TCP bytes.
const MIN_QUOTE: usize = 28;

/// One line of a link transcript.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub at_us: u64,
    /// `client`, `hop N` or `endpoint`.
    pub location: String,
    /// What happened to the frame there.
    pub action: String,
    pub frame: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Event {
    /// Segment arriving at path position `pos` (routers 1..=hops, host hops+1).
    Outbound {
        host: usize,
        pos: u8,
        segment: Segment,
    },
    /// Segment from a host arriving at the scanner.
    Inbound {
        host: usize,
        segment: Segment,
    },
    Icmp {
        host: usize,
        hop: u8,
        router: Ipv4Addr,
        bytes: Vec<u8>,
    },
    Timer {
        host: usize,
        timer: Timer,
    },
}

#[derive(Debug)]
struct Scheduled {
    at: Duration,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

struct SimHost {
    spec: HostSpec,
    stack: EndpointStack,
    middleboxes: HashMap<u8, MiddleboxSpec>,
    nat: HashMap<u8, NatTable>,
}

impl SimHost {
    fn router_addr(index: usize, hop: u8) -> Ipv4Addr {
        Ipv4Addr::from(0x0a00_0000 | ((index as u32 & 0xffff) << 8) | u32::from(hop))
    }

    fn quote_len(&self, hop: u8) -> QuoteLen {
        self.middleboxes.get(&hop).map_or(self.spec.quote_len, |m| m.quote_len)
    }
}

/// A deterministic in-process [`Transport`].
pub struct SimLink {
    hosts: Vec<SimHost>,
    by_addr: HashMap<Ipv4Addr, usize>,
    latency: Duration,
    now: Duration,
    queue: BinaryHeap<Reverse<Scheduled>>,
    next_seq: u64,
    demux: Demux,
    mailboxes: HashMap<SessionHandle, VecDeque<ChannelEvent>>,
    pacer: Pacer,
    transcript: Option<Vec<TranscriptEntry>>,
}

/// Builds a simulated link over every host of `spec`.
pub fn build_topology(spec: &TopologySpec) -> Result<SimLink, TopologyError> {
    SimLink::new(spec, PacerConfig::default())
}

impl SimLink {
    pub fn new(spec: &TopologySpec, pacer: PacerConfig) -> Result<SimLink, TopologyError> {
        spec.validate()?;
        if pacer.rate_pps == 0 {
            return Err(TopologyError::InvalidSpec("pacer rate must be positive".into()));
        }
        let mut hosts = Vec::new();
        let mut by_addr = HashMap::new();
        for (i, h) in spec.hosts.iter().enumerate() {
            let profile = h.profile.resolve().expect("validated profile");
            let seed = spec.seed ^ u64::from(u32::from(h.addr)).rotate_left(17);
            hosts.push(SimHost {
                spec: h.clone(),
                stack: EndpointStack::new(h.addr, h.ports.clone(), profile, seed),
                middleboxes: h.middleboxes.iter().map(|m| (m.hop, *m)).collect(),
                nat: HashMap::new(),
            });
            by_addr.insert(h.addr, i);
        }
        Ok(SimLink {
            hosts,
            by_addr,
            latency: Duration::from_micros(spec.hop_latency_us),
            now: Duration::ZERO,
            queue: BinaryHeap::new(),
            next_seq: 0,
            demux: Demux::new(),
            mailboxes: HashMap::new(),
            pacer: Pacer::new(pacer),
            transcript: None,
        })
    }

    /// Starts recording every frame at every hop.
    pub fn record_transcript(&mut self) {
        self.transcript.get_or_insert_with(Vec::new);
    }

    pub fn transcript(&self) -> &[TranscriptEntry] {
        self.transcript.as_deref().unwrap_or_default()
    }

    pub fn take_transcript(&mut self) -> Vec<TranscriptEntry> {
        self.transcript.as_mut().map(std::mem::take).unwrap_or_default()
    }

    pub fn client_addr(&self) -> Ipv4Addr {
        CLIENT_ADDR
    }

    pub fn host(&self, addr: Ipv4Addr) -> Option<&EndpointStack> {
        self.by_addr.get(&addr).map(|i| &self.hosts[*i].stack)
    }

    /// Address of router `hop` on the path to `addr`.
    pub fn router_addr(&self, addr: Ipv4Addr, hop: u8) -> Option<Ipv4Addr> {
        self.by_addr.get(&addr).map(|i| SimHost::router_addr(*i, hop))
    }

    fn note(&mut self, location: impl Into<String>, action: &str, frame: &[u8]) {
        if let Some(t) = self.transcript.as_mut() {
            t.push(TranscriptEntry {
                at_us: self.now.as_micros() as u64,
                location: location.into(),
                action: action.to_owned(),
                frame: hex::encode(frame),
            });
        }
    }

    fn note_segment(&mut self, location: impl Into<String>, action: &str, segment: &Segment) {
        if self.transcript.is_some() {
            let bytes = segment.serialize().unwrap_or_default();
            self.note(location, action, &bytes);
        }
    }

    fn schedule(&mut self, at: Duration, event: Event) {
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq: self.next_seq, event }));
    }

    /// Processes every event due at or before `until`.
    fn advance(&mut self, until: Duration) {
        while self.queue.peek().is_some_and(|e| e.0.at <= until) {
            self.step();
        }
        self.now = self.now.max(until);
    }

    fn step(&mut self) {
        let Some(Reverse(s)) = self.queue.pop() else { return };
        self.now = self.now.max(s.at);
        match s.event {
            Event::Outbound { host, pos, segment } => self.on_outbound(host, pos, segment),
            Event::Inbound { host: _, segment } => self.on_inbound(segment),
            Event::Icmp { host: _, hop, router, bytes } => self.on_icmp(hop, router, bytes),
            Event::Timer { host, timer } => {
                let outputs = self.hosts[host].stack.on_timer(timer);
                self.emit(host, outputs);
            }
        }
    }

    fn on_outbound(&mut self, host: usize, pos: u8, mut segment: Segment) {
        let hops = self.hosts[host].spec.hops;
        if pos > hops {
            self.note_segment("endpoint", "receive", &segment);
            if self.hosts[host].spec.blackhole {
                return;
            }
            let outputs = self.hosts[host].stack.on_segment(&segment);
            self.emit(host, outputs);
            return;
        }
        let location = format!("hop {pos}");
        self.note_segment(location.as_str(), "receive", &segment);
        let h = &mut self.hosts[host];
        if let Some(m) = h.middleboxes.get(&pos).copied() {
            m.kind.apply_outbound(&mut segment, h.nat.entry(pos).or_default());
            self.note_segment(location.as_str(), "rewrite", &segment);
        }
        if segment.ip.ttl <= 1 {
            let mut quoted = segment.serialize().unwrap_or_default();
            if self.hosts[host].quote_len(pos) == QuoteLen::Min28 {
                quoted.truncate(MIN_QUOTE);
            }
            let icmp = build_icmp_time_exceeded(&quoted);
            self.note(location.as_str(), "expire", &icmp);
            let router = SimHost::router_addr(host, pos);
            let at = self.now + self.latency * u32::from(pos);
            self.schedule(at, Event::Icmp { host, hop: pos, router, bytes: icmp });
            return;
        }
        segment.ip.ttl -= 1;
        let segment = segment.finalize_keep_tcp_checksum();
        let at = self.now + self.latency;
        self.schedule(at, Event::Outbound { host, pos: pos + 1, segment });
    }

    fn emit(&mut self, host: usize, outputs: Vec<Output>) {
        for o in outputs {
            match o {
                Output::Send(segment) => self.send_back(host, segment),
                Output::Arm(delay, timer) => {
                    let at = self.now + delay;
                    self.schedule(at, Event::Timer { host, timer });
                }
            }
        }
    }

    fn send_back(&mut self, host: usize, mut segment: Segment) {
        self.note_segment("endpoint", "send", &segment);
        let h = &mut self.hosts[host];
        let hops = h.spec.hops;
        for pos in (1..=hops).rev() {
            if let Some(m) = h.middleboxes.get(&pos) {
                m.kind.apply_inbound(&mut segment, h.nat.entry(pos).or_default());
            }
        }
        segment.ip.ttl = DEFAULT_TTL - hops;
        let segment = segment.finalize_keep_tcp_checksum();
        let at = self.now + self.latency * (u32::from(hops) + 1);
        self.schedule(at, Event::Inbound { host, segment });
    }

    fn on_inbound(&mut self, segment: Segment) {
        match self.demux.route_tcp(&segment) {
            Some(h) => {
                self.note_segment("client", "receive", &segment);
                let ev = ChannelEvent { kind: EventKind::Tcp(segment), at: self.now };
                self.mailboxes.entry(h).or_default().push_back(ev);
            }
            None => self.note_segment("client", "unclaimed", &segment),
        }
    }

    fn on_icmp(&mut self, _hop: u8, router: Ipv4Addr, bytes: Vec<u8>) {
        match self.demux.route_icmp(&bytes) {
            Some(h) => {
                self.note("client", "receive icmp", &bytes);
                let ev = ChannelEvent { kind: EventKind::Icmp { bytes, source: router }, at: self.now };
                self.mailboxes.entry(h).or_default().push_back(ev);
            }
            None => self.note("client", "unclaimed icmp", &bytes),
        }
    }

    /// Runs the network until nothing is left to happen or `limit` passes.
    pub fn run_until_idle(&mut self, limit: Duration) {
        self.advance(limit);
    }
}

impl Transport for SimLink {
    fn open_session(&mut self, local: Endpoint, remote: Endpoint) -> Result<SessionHandle, TransportError> {
        if !self.by_addr.contains_key(remote.ip()) {
            return Err(TransportError::NoRoute(remote));
        }
        let h = self.demux.open(local, remote)?;
        self.mailboxes.insert(h, VecDeque::new());
        Ok(h)
    }

    fn close_session(&mut self, handle: SessionHandle) {
        self.demux.close(handle);
        self.mailboxes.remove(&handle);
    }

    fn send(&mut self, handle: SessionHandle, segment: &Segment) -> Result<Duration, TransportError> {
        if !self.demux.is_open(handle) {
            return Err(TransportError::SessionClosed(handle));
        }
        let host = *self.by_addr.get(&segment.ip.dest_addr).ok_or(TransportError::NoRoute(segment.destination()))?;
        let bytes = segment.serialize()?;
        self.demux.note_sent(handle, segment)?;
        let at = self.pacer.reserve(self.now);
        self.advance(at);
        self.note("client", "send", &bytes);
        let arrive = self.now + self.latency;
        self.schedule(arrive, Event::Outbound { host, pos: 1, segment: segment.clone() });
        Ok(at)
    }

    fn next_event(&mut self, handle: SessionHandle, deadline: Duration) -> Result<ChannelEvent, TransportError> {
        loop {
            let mailbox = self.mailboxes.get_mut(&handle).ok_or(TransportError::SessionClosed(handle))?;
            if let Some(ev) = mailbox.pop_front() {
                return Ok(ev);
            }
            if self.queue.peek().is_some_and(|e| e.0.at <= deadline) {
                self.step();
            } else {
                self.now = self.now.max(deadline);
                return Ok(ChannelEvent { kind: EventKind::Timeout, at: self.now });
            }
        }
    }

    fn now(&self) -> Duration {
        self.now
    }
}
