use std::collections::{HashMap, HashSet};

use super::{Endpoint, SessionHandle, TransportError};
use crate::segment::{PartialSegment, Segment};

#[derive(Debug)]
struct Entry {
    local: Endpoint,
    remote: Endpoint,
    sent_seqs: HashSet<u32>,
}

/// Session table shared by the transports: owns 4-tuple uniqueness and maps
/// inbound packets to at most one session.
#[derive(Debug, Default)]
pub struct Demux {
    next_id: u64,
    sessions: HashMap<SessionHandle, Entry>,
    by_tuple: HashMap<(Endpoint, Endpoint), SessionHandle>,
}

impl Demux {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&mut self, local: Endpoint, remote: Endpoint) -> Result<SessionHandle, TransportError> {
        if self.by_tuple.contains_key(&(local, remote)) {
            return Err(TransportError::PortInUse { local, remote });
        }
        self.next_id += 1;
        let handle = SessionHandle(self.next_id);
        self.sessions.insert(handle, Entry { local, remote, sent_seqs: HashSet::new() });
        self.by_tuple.insert((local, remote), handle);
        Ok(handle)
    }

    pub fn close(&mut self, handle: SessionHandle) -> bool {
        match self.sessions.remove(&handle) {
            Some(e) => {
                self.by_tuple.remove(&(e.local, e.remote));
                true
            }
            None => false,
        }
    }

    pub fn is_open(&self, handle: SessionHandle) -> bool {
        self.sessions.contains_key(&handle)
    }

    pub fn tuple(&self, handle: SessionHandle) -> Option<(Endpoint, Endpoint)> {
        self.sessions.get(&handle).map(|e| (e.local, e.remote))
    }

    /// Remembers an outbound sequence number so that ICMP quotes with a
    /// translated source port can still be attributed.
    pub fn note_sent(&mut self, handle: SessionHandle, segment: &Segment) -> Result<(), TransportError> {
        let entry = self.sessions.get_mut(&handle).ok_or(TransportError::SessionClosed(handle))?;
        entry.sent_seqs.insert(segment.tcp.seq);
        Ok(())
    }

    pub fn route_tcp(&self, segment: &Segment) -> Option<SessionHandle> {
        self.by_tuple.get(&(segment.destination(), segment.source())).copied()
    }

    /// Routes an ICMP error by the 4-tuple of its quote, falling back to the
    /// remote endpoint plus a sequence number this session sent.
    pub fn route_icmp(&self, icmp: &[u8]) -> Option<SessionHandle> {
        let quoted = match icmp.first() {
            Some(3 | 4 | 5 | 11 | 12) if icmp.len() > 8 => &icmp[8..],
            _ => return None,
        };
        let quote = PartialSegment::parse(quoted).ok()?;
        let local = Endpoint::new(quote.ip.source_addr, quote.tcp.source_port);
        let remote = Endpoint::new(quote.ip.dest_addr, quote.tcp.dest_port);
        if let Some(h) = self.by_tuple.get(&(local, remote)) {
            return Some(*h);
        }
        let mut candidates =
            self.sessions.iter().filter(|(_, e)| e.remote == remote && e.sent_seqs.contains(&quote.tcp.seq));
        match (candidates.next(), candidates.next()) {
            (Some((h, _)), None) => Some(*h),
            _ => None,
        }
    }
}
