//! Active TCP conformance probing.
//!
//! Probes a target for eight mandatory TCP behaviors with hand-crafted
//! IPv4/TCP segments, localizes on-path interference with TTL-limited copies
//! of each test's first segment, and classifies every outcome as PASS, UNK,
//! F_TARGET or F_PATH. A deterministic simulator ([`netsim`]) provides
//! endpoints with configurable deviations and rewriting middleboxes.

pub mod netsim;
pub mod reporting;
pub mod run;
pub mod segment;
pub mod suite;
pub mod targets;
pub mod tracer;
pub mod transport;

pub use segment::{Segment, TcpFlags, TcpOption};
pub use suite::{TestId, Verdict, VerdictClass};
