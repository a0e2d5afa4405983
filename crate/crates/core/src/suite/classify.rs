//! Verdicts from recorded exchanges.

use super::exchange::{ProbeExchange, Stage};
use super::{Liveness, Note, Reachability, TestId, Verdict, VerdictClass, ACK_STAGE, SYN_STAGE};
use crate::segment::{seq_ge, TcpFlags};
use crate::tracer::diagnose;

/// Smallest and largest gap ratio that still looks like exponential
/// backoff.
const BACKOFF_RATIO: (f64, f64) = (1.5, 2.5);
/// A single retransmission this long after the SYN/ACK looks like an RTO.
const MIN_RTO_US: u64 = 200_000;

pub fn classify_liveness(ex: &ProbeExchange) -> Liveness {
    if ex.syn_ack(Stage::Liveness).is_some() {
        Liveness::Alive
    } else {
        Liveness::Dead
    }
}

/// Largest TCP payload the target sent on the primary connection.
pub fn max_payload(ex: &ProbeExchange) -> Option<usize> {
    ex.received(Stage::Primary).map(|(_, s)| s.payload.len()).filter(|len| *len > 0).max()
}

/// Computes the verdict of a test from its exchange alone.
pub fn classify(ex: &ProbeExchange) -> Verdict {
    let mut v = match ex.test {
        TestId::ChecksumIncorrect | TestId::ChecksumZero => checksum(ex),
        TestId::OptionSupport | TestId::OptionUnknown => options(ex),
        TestId::MssSupport | TestId::MssMissing => mss(ex),
        TestId::Reserved => reserved(ex),
        TestId::UrgentPointer => urgent(ex),
    };
    if ex.fan.is_some() {
        let diagnosis = diagnose(&ex.observations(), ex.test.relevant_fields());
        if diagnosis.modified {
            v.result = VerdictClass::FPath;
        }
        v.path = Some(diagnosis);
    }
    v
}

fn worst(v: &Verdict) -> VerdictClass {
    v.sub_results.values().copied().max().unwrap_or(VerdictClass::Pass)
}

fn checksum(ex: &ProbeExchange) -> Verdict {
    let mut v = Verdict::new(ex.test, VerdictClass::Pass);
    let syn_stage = if ex.syn_ack(Stage::Primary).is_some() { VerdictClass::FTarget } else { VerdictClass::Pass };
    v.sub_results.insert(SYN_STAGE.into(), syn_stage);

    let ack_stage = if ex.syn_ack(Stage::Secondary).is_none() {
        v.notes.push(Note::HandshakeFailed);
        VerdictClass::Unk
    } else {
        let data_end = ex
            .sent(Stage::Secondary)
            .find(|(_, s)| !s.payload.is_empty())
            .map(|(_, s)| s.tcp.seq.wrapping_add(s.payload.len() as u32));
        let accepted = data_end.is_some_and(|end| {
            ex.received(Stage::Secondary).any(|(_, s)| {
                !s.is(TcpFlags::RST) && (!s.payload.is_empty() || (s.is(TcpFlags::ACK) && seq_ge(s.tcp.ack, end)))
            })
        });
        if accepted {
            VerdictClass::FTarget
        } else {
            VerdictClass::Pass
        }
    };
    v.sub_results.insert(ACK_STAGE.into(), ack_stage);
    v.result = worst(&v);
    v
}

fn options(ex: &ProbeExchange) -> Verdict {
    if ex.syn_ack(Stage::Primary).is_some() {
        return Verdict::new(ex.test, VerdictClass::Pass);
    }
    let mut v = Verdict::new(ex.test, VerdictClass::FTarget);
    v.notes.push(if ex.got_reset(Stage::Primary) { Note::ResetByTarget } else { Note::SilentDiscard });
    v
}

fn mss(ex: &ProbeExchange) -> Verdict {
    // without an observation the support test fails outright; the missing
    // option test cannot tell
    let inconclusive = if ex.test == TestId::MssMissing { VerdictClass::Unk } else { VerdictClass::FTarget };
    if ex.syn_ack(Stage::Primary).is_none() {
        let mut v = Verdict::new(ex.test, inconclusive);
        v.notes.push(Note::HandshakeFailed);
        return v;
    }
    match (max_payload(ex), ex.mss_limit) {
        (None, _) => {
            let mut v = Verdict::new(ex.test, inconclusive);
            v.notes.push(Note::NoData);
            v
        }
        (Some(max), Some(limit)) if max > usize::from(limit) => Verdict::new(ex.test, VerdictClass::FTarget),
        _ => Verdict::new(ex.test, VerdictClass::Pass),
    }
}

fn backoff_like(synack_us: u64, retransmits: &[u64]) -> bool {
    let mut times = vec![synack_us];
    times.extend_from_slice(retransmits);
    let gaps: Vec<f64> = times.windows(2).map(|w| w[1].saturating_sub(w[0]) as f64).collect();
    match gaps.as_slice() {
        [] => false,
        [g] => *g >= MIN_RTO_US as f64,
        _ => gaps.windows(2).all(|w| {
            let r = w[1] / w[0].max(1.0);
            (BACKOFF_RATIO.0..=BACKOFF_RATIO.1).contains(&r)
        }),
    }
}

fn reserved(ex: &ProbeExchange) -> Verdict {
    let mut v = Verdict::new(ex.test, VerdictClass::Pass);
    let Some((synack_us, synack)) = ex.syn_ack(Stage::Primary) else {
        v.sub_results.insert(SYN_STAGE.into(), VerdictClass::FTarget);
        v.notes.push(if ex.got_reset(Stage::Primary) { Note::ResetByTarget } else { Note::SilentDiscard });
        v.result = VerdictClass::FTarget;
        return v;
    };
    let syn_stage = if synack.tcp.reserved == 0 { VerdictClass::Pass } else { VerdictClass::FTarget };
    v.sub_results.insert(SYN_STAGE.into(), syn_stage);

    let ack =
        ex.sent(Stage::Primary).find(|(_, s)| s.is(TcpFlags::ACK) && !s.is(TcpFlags::SYN) && !s.is(TcpFlags::RST));
    if let Some((ack_us, _)) = ack {
        let retransmits: Vec<u64> =
            ex.received(Stage::Primary).filter(|(at, s)| s.is_syn_ack() && *at > ack_us).map(|(at, _)| at).collect();
        if retransmits.is_empty() {
            v.sub_results.insert(ACK_STAGE.into(), VerdictClass::Pass);
        } else {
            v.sub_results.insert(ACK_STAGE.into(), VerdictClass::FTarget);
            if backoff_like(synack_us, &retransmits) {
                v.notes.push(Note::PossibleDeferAccept);
            }
            let probe = ex
                .sent(Stage::Primary)
                .find(|(at, s)| *at > ack_us && s.payload.len() == 1)
                .map(|(_, s)| s.tcp.seq.wrapping_add(1));
            if let Some(end) = probe {
                let confirmed = ex
                    .received(Stage::Primary)
                    .any(|(_, s)| !s.is(TcpFlags::SYN) && s.is(TcpFlags::ACK) && seq_ge(s.tcp.ack, end));
                if confirmed {
                    v.notes.push(Note::DeferAcceptConfirmed);
                }
            }
        }
    }
    v.result = worst(&v);
    v
}

fn urgent(ex: &ProbeExchange) -> Verdict {
    let mut v = Verdict::new(ex.test, VerdictClass::Pass);
    let urgent_end = ex
        .sent(Stage::Primary)
        .find(|(_, s)| s.is(TcpFlags::URG) && !s.payload.is_empty())
        .map(|(_, s)| s.tcp.seq.wrapping_add(u32::from(s.tcp.urgent_pointer)));
    let (true, Some(end)) = (ex.syn_ack(Stage::Primary).is_some(), urgent_end) else {
        v.result = VerdictClass::Unk;
        v.notes.push(Note::HandshakeFailed);
        return v;
    };
    let acked =
        ex.received(Stage::Primary).any(|(_, s)| s.is(TcpFlags::ACK) && !s.is(TcpFlags::RST) && seq_ge(s.tcp.ack, end));
    if !acked {
        v.result = VerdictClass::FTarget;
        v.notes.push(if ex.got_reset(Stage::Primary) { Note::ResetByTarget } else { Note::SilentDiscard });
    }
    if ex.sent(Stage::PostLiveness).next().is_some() {
        v.post_liveness = Some(if ex.syn_ack(Stage::PostLiveness).is_some() {
            Reachability::Reachable
        } else {
            Reachability::Unreachable
        });
    }
    if ex.got_reset(Stage::Probe) {
        v.notes.push(Note::Recovered);
    }
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_detection() {
        let s = 1_000_000;
        assert!(backoff_like(s, &[s + 1_000_000, s + 3_000_000, s + 7_000_000]));
        assert!(!backoff_like(s, &[s + 1_000_000, s + 2_000_000, s + 3_000_000]));
        assert!(backoff_like(s, &[s + 1_000_000]));
        assert!(!backoff_like(s, &[s + 50_000]));
    }
}
