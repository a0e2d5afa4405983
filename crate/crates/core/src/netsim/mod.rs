//! Deterministic network simulator.
//!
//! Hosts run a small TCP responder whose behavior is shaped by a
//! [`StackProfile`]; the path to each host is a chain of routers, some of
//! which rewrite segments. Routers decrement the TTL and answer expiry with
//! ICMP time-exceeded. Everything runs on a virtual clock, so timers of
//! seconds cost nothing.

mod endpoint;
mod link;
mod middlebox;
mod profile;
mod script;
mod topology;

pub use endpoint::{response_body, ConnState, EndpointStack, Output, Timer, INITIAL_RTO, MAX_SYNACK_RETRIES};
pub use link::{build_topology, SimLink, TranscriptEntry};
pub use middlebox::{MiddleboxKind, MiddleboxSpec, NatTable, QuoteLen};
pub use profile::{Deviations, StackProfile, DEFAULT_BODY_LEN, DEFAULT_LOCAL_MSS};
pub use script::{run_script, Expect, ScriptError, ScriptStep};
pub use topology::{
    HostSpec, ProfileRef, TopologyError, TopologySpec, CLIENT_ADDR, DEFAULT_HOPS, DEFAULT_HOP_LATENCY_US,
};
