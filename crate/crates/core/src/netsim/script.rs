//! Scripted exchanges over a simulated topology.
//!
//! A script is a list of steps on a virtual timeline: segments the scanner
//! sends at a given time, and replies it expects by a given time.

use std::time::Duration;

use thiserror::Error;

use super::link::{SimLink, TranscriptEntry};
use super::topology::{TopologyError, TopologySpec};
use crate::segment::{Segment, TcpFlags};
use crate::transport::{EventKind, SessionHandle, Transport, TransportError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    /// A TCP segment with exactly these flags.
    Tcp(TcpFlags),
    /// An ICMP time-exceeded from the router at this hop.
    TimeExceeded { hop: u8 },
    /// Nothing at all.
    Silence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScriptStep {
    /// Sends the segment as given (checksums are not touched) at `at`.
    Send { at: Duration, segment: Segment },
    /// The next event on the step's session must match by `by`.
    Expect { by: Duration, expect: Expect },
}

#[derive(Debug, Error)]
pub enum ScriptError {
    #[error("step {0}: time goes backwards")]
    NotMonotonic(usize),
    #[error("step {0}: expectation before any segment was sent")]
    NoSession(usize),
    #[error("step {step}: expected {expected:?}, got {got}")]
    Mismatch { step: usize, expected: Expect, got: String },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Transport(#[from] TransportError),
}

/// Runs `steps` against a fresh link built from `topology` and returns the
/// frames seen at every hop.
pub fn run_script(topology: &TopologySpec, steps: &[ScriptStep]) -> Result<Vec<TranscriptEntry>, ScriptError> {
    let mut link = SimLink::new(topology, Default::default())?;
    link.record_transcript();
    let mut sessions: Vec<(Segment, SessionHandle)> = Vec::new();
    let mut current: Option<SessionHandle> = None;
    let mut last = Duration::ZERO;
    for (i, step) in steps.iter().enumerate() {
        let at = match step {
            ScriptStep::Send { at, .. } => *at,
            ScriptStep::Expect { by, .. } => *by,
        };
        if at < last {
            return Err(ScriptError::NotMonotonic(i));
        }
        last = at;
        match step {
            ScriptStep::Send { at, segment } => {
                let known = sessions
                    .iter()
                    .find(|(s, _)| s.source() == segment.source() && s.destination() == segment.destination())
                    .map(|(_, h)| *h);
                let h = match known {
                    Some(h) => h,
                    None => {
                        let h = link.open_session(segment.source(), segment.destination())?;
                        sessions.push((segment.clone(), h));
                        h
                    }
                };
                link.run_until_idle(*at);
                link.send(h, segment)?;
                current = Some(h);
            }
            ScriptStep::Expect { by, expect } => {
                let h = current.ok_or(ScriptError::NoSession(i))?;
                let ev = link.next_event(h, *by)?;
                let ok = match (&ev.kind, expect) {
                    (EventKind::Tcp(s), Expect::Tcp(flags)) => s.tcp.flags == *flags,
                    (EventKind::Icmp { source, .. }, Expect::TimeExceeded { hop }) => {
                        let dst = sessions.iter().find(|(_, s)| *s == h).map(|(s, _)| s.ip.dest_addr);
                        dst.and_then(|d| link.router_addr(d, *hop)) == Some(*source)
                    }
                    (EventKind::Timeout, Expect::Silence) => true,
                    _ => false,
                };
                if !ok {
                    let got = match ev.kind {
                        EventKind::Tcp(s) => s.summary(),
                        EventKind::Icmp { source, .. } => format!("icmp from {source}"),
                        EventKind::Timeout => "timeout".to_owned(),
                    };
                    return Err(ScriptError::Mismatch { step: i, expected: expect.clone(), got });
                }
            }
        }
    }
    Ok(link.take_transcript())
}
