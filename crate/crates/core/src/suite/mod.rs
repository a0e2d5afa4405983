//! The eight conformance tests.
//!
//! Each test runs as a scripted exchange on fresh 4-tuples. Everything sent
//! and received is kept in a [`ProbeExchange`]; the verdict is computed from
//! that record alone by [`classify`], so stored evidence can be
//! re-classified offline.

mod classify;
mod config;
mod elicitor;
mod exchange;
mod probe;
mod runner;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tracer::{Carriers, Field, PathDiagnosis};

pub use classify::{classify, classify_liveness, max_payload};
pub use config::SuiteConfig;
pub use elicitor::{elicitor, http_get, tls_client_hello};
pub use exchange::{Direction, FanRecord, Frame, Packet, ProbeExchange, Stage};
pub use probe::PortAllocator;
pub use runner::{liveness, run_suite, run_test, TargetReport, TestOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TestId {
    #[serde(alias = "ChecksumIncorrect")]
    ChecksumIncorrect,
    #[serde(alias = "ChecksumZero")]
    ChecksumZero,
    #[serde(alias = "OptionSupport")]
    OptionSupport,
    #[serde(alias = "OptionUnknown")]
    OptionUnknown,
    #[serde(alias = "MSSSupport")]
    MssSupport,
    #[serde(alias = "MSSMissing")]
    MssMissing,
    #[serde(alias = "Reserved")]
    Reserved,
    #[serde(alias = "UrgentPointer")]
    UrgentPointer,
}

impl TestId {
    pub const ALL: [TestId; 8] = [
        TestId::ChecksumIncorrect,
        TestId::ChecksumZero,
        TestId::OptionSupport,
        TestId::OptionUnknown,
        TestId::MssSupport,
        TestId::MssMissing,
        TestId::Reserved,
        TestId::UrgentPointer,
    ];

    /// Name as printed in result tables.
    pub fn name(self) -> &'static str {
        match self {
            TestId::ChecksumIncorrect => "ChecksumIncorrect",
            TestId::ChecksumZero => "ChecksumZero",
            TestId::OptionSupport => "OptionSupport",
            TestId::OptionUnknown => "OptionUnknown",
            TestId::MssSupport => "MSSSupport",
            TestId::MssMissing => "MSSMissing",
            TestId::Reserved => "Reserved",
            TestId::UrgentPointer => "UrgentPointer",
        }
    }

    /// Identifier used in files and on the command line.
    pub fn key(self) -> &'static str {
        match self {
            TestId::ChecksumIncorrect => "CHECKSUM_INCORRECT",
            TestId::ChecksumZero => "CHECKSUM_ZERO",
            TestId::OptionSupport => "OPTION_SUPPORT",
            TestId::OptionUnknown => "OPTION_UNKNOWN",
            TestId::MssSupport => "MSS_SUPPORT",
            TestId::MssMissing => "MSS_MISSING",
            TestId::Reserved => "RESERVED",
            TestId::UrgentPointer => "URGENT_POINTER",
        }
    }

    /// Header fields whose modification on path changes what the test
    /// measures.
    pub fn relevant_fields(self) -> &'static [Field] {
        match self {
            TestId::ChecksumIncorrect | TestId::ChecksumZero => &[Field::Checksum],
            TestId::OptionSupport | TestId::OptionUnknown => &[Field::Options],
            TestId::MssSupport | TestId::MssMissing => &[Field::Mss],
            TestId::Reserved => &[Field::ReservedBits],
            TestId::UrgentPointer => &[Field::UrgFlag, Field::UrgentPointer],
        }
    }

    /// TTL carriers of the test's fan.
    pub fn carriers(self) -> Carriers {
        match self {
            TestId::OptionSupport | TestId::OptionUnknown => Carriers::all() - Carriers::NOOP_COUNT,
            // the fan copies data segments here; the acknowledgment number
            // must stay meaningful to the receiver
            TestId::UrgentPointer => Carriers::all() - Carriers::URGENT_PTR - Carriers::ACK_NUM,
            _ => Carriers::all(),
        }
    }

    /// Whether UNK is a possible outcome.
    pub fn can_be_unknown(self) -> bool {
        matches!(self, TestId::ChecksumIncorrect | TestId::ChecksumZero | TestId::MssMissing | TestId::UrgentPointer)
    }
}

impl fmt::Display for TestId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TestId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = |x: &str| x.replace(['_', '-'], "").to_ascii_lowercase();
        let wanted = norm(s);
        TestId::ALL.into_iter().find(|t| norm(t.key()) == wanted).ok_or_else(|| format!("unknown test {s:?}"))
    }
}

/// Outcome class. Ordered from best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum VerdictClass {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "UNK")]
    Unk,
    #[serde(rename = "F_TARGET")]
    FTarget,
    #[serde(rename = "F_PATH")]
    FPath,
}

impl fmt::Display for VerdictClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictClass::Pass => "PASS",
            VerdictClass::Unk => "UNK",
            VerdictClass::FTarget => "F_TARGET",
            VerdictClass::FPath => "F_PATH",
        })
    }
}

impl FromStr for VerdictClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "PASS" => Ok(VerdictClass::Pass),
            "UNK" => Ok(VerdictClass::Unk),
            "F_TARGET" => Ok(VerdictClass::FTarget),
            "F_PATH" => Ok(VerdictClass::FPath),
            _ => Err(format!("unknown verdict {s:?}")),
        }
    }
}

/// Extra evidence attached to a verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Note {
    /// The control handshake got no SYN/ACK.
    HandshakeFailed,
    /// No data segment ever arrived.
    NoData,
    /// The target answered the test with a RST.
    ResetByTarget,
    /// The target neither acknowledged nor reset.
    SilentDiscard,
    /// SYN/ACK retransmissions follow an RTO backoff, as a server using
    /// deferred accept would produce.
    PossibleDeferAccept,
    /// The extra data byte stopped the retransmissions.
    DeferAcceptConfirmed,
    /// The host answered a probe on the pre-test connection with a RST,
    /// so it lost connection state in between.
    Recovered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Liveness {
    Alive,
    Dead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Reachability {
    Reachable,
    Unreachable,
}

pub const SYN_STAGE: &str = "syn_stage";
pub const ACK_STAGE: &str = "ack_stage";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub test: TestId,
    pub result: VerdictClass,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub sub_results: BTreeMap<String, VerdictClass>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<Note>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathDiagnosis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub post_liveness: Option<Reachability>,
}

impl Verdict {
    pub fn new(test: TestId, result: VerdictClass) -> Verdict {
        Verdict { test, result, sub_results: BTreeMap::new(), notes: Vec::new(), path: None, post_liveness: None }
    }

    pub fn sub(&self, key: &str) -> Option<VerdictClass> {
        self.sub_results.get(key).copied()
    }

    pub fn has(&self, note: Note) -> bool {
        self.notes.contains(&note)
    }

    pub fn path_hop(&self) -> Option<u8> {
        self.path.as_ref().and_then(|p| p.first_modifying_hop)
    }
}
