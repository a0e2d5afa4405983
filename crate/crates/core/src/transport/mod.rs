//! Probe channels.
//!
//! A [`Transport`] sends crafted segments exactly once each and hands back
//! inbound TCP segments and ICMP errors per session. There is no
//! retransmission machinery: a [`EventKind::Timeout`] is the only loss
//! signal a test ever sees.

mod demux;
mod pacer;
#[cfg(target_os = "linux")]
pub mod raw;

use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::time::Duration;

use thiserror::Error;

use crate::segment::Segment;

pub use demux::Demux;
pub use pacer::{Pacer, PacerConfig, DEFAULT_BURST, DEFAULT_RATE_PPS};

/// An IPv4 address and TCP port.
pub type Endpoint = SocketAddrV4;

/// Default wait for a reply to a probe.
pub const DEFAULT_REPLY_DEADLINE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SessionHandle(pub u64);

impl fmt::Display for SessionHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "session#{}", self.0)
    }
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("{local} -> {remote} is already in use by a live session")]
    PortInUse { local: Endpoint, remote: Endpoint },
    #[error("no route to {0}")]
    NoRoute(Endpoint),
    #[error("{0} is closed")]
    SessionClosed(SessionHandle),
    #[error("raw sockets need elevated privileges (CAP_NET_RAW): {0}")]
    Privilege(std::io::Error),
    #[error("malformed outbound segment: {0}")]
    Segment(#[from] crate::segment::SegmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Tcp(Segment),
    /// An ICMP message (starting at the ICMP header) and the address of the
    /// router that sent it.
    Icmp {
        bytes: Vec<u8>,
        source: Ipv4Addr,
    },
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelEvent {
    pub kind: EventKind,
    /// Monotonic time since the transport started.
    pub at: Duration,
}

pub trait Transport {
    /// Registers a 4-tuple. Inbound segments for it, and ICMP errors quoting
    /// it, are routed to the returned session.
    fn open_session(&mut self, local: Endpoint, remote: Endpoint) -> Result<SessionHandle, TransportError>;

    fn close_session(&mut self, handle: SessionHandle);

    /// Transmits one segment through the pacer and returns when it left.
    fn send(&mut self, handle: SessionHandle, segment: &Segment) -> Result<Duration, TransportError>;

    /// Next event for the session, or `Timeout` once the transport clock
    /// reaches `deadline` (an absolute time, see [`Transport::now`]).
    fn next_event(&mut self, handle: SessionHandle, deadline: Duration) -> Result<ChannelEvent, TransportError>;

    /// Current monotonic time.
    fn now(&self) -> Duration;
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn open_session(&mut self, local: Endpoint, remote: Endpoint) -> Result<SessionHandle, TransportError> {
        (**self).open_session(local, remote)
    }
    fn close_session(&mut self, handle: SessionHandle) {
        (**self).close_session(handle)
    }
    fn send(&mut self, handle: SessionHandle, segment: &Segment) -> Result<Duration, TransportError> {
        (**self).send(handle, segment)
    }
    fn next_event(&mut self, handle: SessionHandle, deadline: Duration) -> Result<ChannelEvent, TransportError> {
        (**self).next_event(handle, deadline)
    }
    fn now(&self) -> Duration {
        (**self).now()
    }
}
