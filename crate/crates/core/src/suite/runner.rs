//! Test execution.

use std::net::Ipv4Addr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::classify::{classify, classify_liveness};
use super::elicitor::elicitor;
use super::exchange::{ProbeExchange, Stage};
use super::probe::{Conn, PortAllocator, Prober};
use super::{Liveness, SuiteConfig, TestId, Verdict};
use crate::segment::{compute_tcp_checksum, seq_ge, Segment, TcpFlags, TcpOption};
use crate::transport::{Endpoint, Transport, TransportError};

/// One executed test: the verdict and the evidence it was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub verdict: Verdict,
    pub exchange: ProbeExchange,
}

/// Liveness plus every enabled test for one target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetReport {
    pub target: Endpoint,
    pub liveness: Liveness,
    pub liveness_exchange: ProbeExchange,
    pub outcomes: Vec<TestOutcome>,
}

impl TargetReport {
    pub fn verdict(&self, test: TestId) -> Option<&Verdict> {
        self.outcomes.iter().find(|o| o.verdict.test == test).map(|o| &o.verdict)
    }
}

/// Deterministic per-target generator.
fn target_rng(seed: u64, target: Endpoint) -> ChaCha8Rng {
    let t = (u64::from(u32::from(*target.ip())) << 16) | u64::from(target.port());
    ChaCha8Rng::seed_from_u64(seed ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Runs liveness and, for a live target, each test in `tests` on fresh
/// 4-tuples.
pub fn run_suite<T: Transport>(
    transport: &mut T,
    local_addr: Ipv4Addr,
    target: Endpoint,
    host_name: Option<&str>,
    tests: &[TestId],
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<TargetReport, TransportError> {
    let mut rng = target_rng(seed, target);
    let mut ports = PortAllocator::new(rng.gen());
    let host = host_name.map_or_else(|| target.ip().to_string(), str::to_owned);
    let liveness_exchange = liveness_with(transport, cfg, local_addr, target, &mut ports, &mut rng)?;
    let liveness = classify_liveness(&liveness_exchange);
    let mut outcomes = Vec::new();
    if liveness == Liveness::Alive {
        for &test in tests {
            let exchange = execute(transport, cfg, local_addr, target, &host, test, &mut ports, &mut rng)?;
            outcomes.push(TestOutcome { verdict: classify(&exchange), exchange });
        }
    }
    Ok(TargetReport { target, liveness, liveness_exchange, outcomes })
}

/// Runs a single test without the liveness check.
pub fn run_test<T: Transport>(
    transport: &mut T,
    local_addr: Ipv4Addr,
    target: Endpoint,
    test: TestId,
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<TestOutcome, TransportError> {
    let mut rng = target_rng(seed, target);
    let mut ports = PortAllocator::new(rng.gen());
    let host = target.ip().to_string();
    let exchange = execute(transport, cfg, local_addr, target, &host, test, &mut ports, &mut rng)?;
    Ok(TestOutcome { verdict: classify(&exchange), exchange })
}

/// Plain SYN; a SYN/ACK means alive.
pub fn liveness<T: Transport>(
    transport: &mut T,
    local_addr: Ipv4Addr,
    target: Endpoint,
    cfg: &SuiteConfig,
    seed: u64,
) -> Result<Liveness, TransportError> {
    let mut rng = target_rng(seed, target);
    let mut ports = PortAllocator::new(rng.gen());
    let ex = liveness_with(transport, cfg, local_addr, target, &mut ports, &mut rng)?;
    Ok(classify_liveness(&ex))
}

fn liveness_with<T: Transport>(
    transport: &mut T,
    cfg: &SuiteConfig,
    local_addr: Ipv4Addr,
    target: Endpoint,
    ports: &mut PortAllocator,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeExchange, TransportError> {
    // the exchange is tagged with the first test only for typing; the
    // liveness stage is what matters
    let ex = ProbeExchange::new(TestId::ChecksumIncorrect, target);
    let mut p = Prober::new(transport, cfg, local_addr, target, ports, rng, ex);
    plain_syn(&mut p, Stage::Liveness)?;
    Ok(p.finish())
}

fn plain_syn<T: Transport>(p: &mut Prober<'_, T>, stage: Stage) -> Result<bool, TransportError> {
    let mut conn = p.open(stage)?;
    let syn = p.segment(&conn, TcpFlags::SYN).finalize();
    let alive = p.handshake_syn(&mut conn, syn, None)?.is_some();
    p.reset(&conn)?;
    p.close(&conn);
    Ok(alive)
}

#[allow(clippy::too_many_arguments)]
fn execute<T: Transport>(
    transport: &mut T,
    cfg: &SuiteConfig,
    local_addr: Ipv4Addr,
    target: Endpoint,
    host: &str,
    test: TestId,
    ports: &mut PortAllocator,
    rng: &mut ChaCha8Rng,
) -> Result<ProbeExchange, TransportError> {
    let ex = ProbeExchange::new(test, target);
    let mut p = Prober::new(transport, cfg, local_addr, target, ports, rng, ex);
    let request = elicitor(target.port(), host);
    match test {
        TestId::ChecksumIncorrect | TestId::ChecksumZero => checksum(&mut p, test, &request)?,
        TestId::OptionSupport => {
            let opts = vec![TcpOption::Noop, TcpOption::Noop, TcpOption::Eool];
            options(&mut p, test, opts)?;
        }
        TestId::OptionUnknown => {
            let opt = TcpOption::Unknown { kind: cfg.unknown_option_kind, data: cfg.unknown_option_payload.clone() };
            options(&mut p, test, vec![opt])?;
        }
        TestId::MssSupport => {
            p.ex.mss_limit = Some(cfg.mss_support_value);
            mss(&mut p, test, vec![TcpOption::Mss(cfg.mss_support_value)], &request)?;
        }
        TestId::MssMissing => {
            p.ex.mss_limit = Some(cfg.mss_missing_limit);
            mss(&mut p, test, Vec::new(), &request)?;
        }
        TestId::Reserved => reserved(&mut p)?,
        TestId::UrgentPointer => urgent(&mut p, &request)?,
    }
    Ok(p.finish())
}

/// A checksum value that is wrong for `s` (and for ZERO, exactly zero).
fn bad_checksum(rng: &mut ChaCha8Rng, s: &Segment, test: TestId) -> u16 {
    if test == TestId::ChecksumZero {
        return 0;
    }
    let correct = compute_tcp_checksum(s);
    loop {
        let v: u16 = rng.gen();
        if v != correct && v != 0 {
            return v;
        }
    }
}

fn checksum<T: Transport>(p: &mut Prober<'_, T>, test: TestId, request: &[u8]) -> Result<(), TransportError> {
    // SYN stage: a SYN with a broken checksum must not be answered with
    // a SYN/ACK
    let mut conn = p.open(Stage::Primary)?;
    let mut syn = p.segment(&conn, TcpFlags::SYN).finalize();
    syn.tcp.checksum = bad_checksum(p.rng, &syn, test);
    if p.handshake_syn(&mut conn, syn, Some(test.carriers()))?.is_some() {
        let until = p.deadline();
        p.collect(&conn, until)?;
        p.reset(&conn)?;
    }

    // ACK stage: on a valid connection, data with a broken checksum must
    // not be acknowledged
    let mut conn = p.open(Stage::Secondary)?;
    if !p.connect(&mut conn)? {
        return Ok(());
    }
    let mut data = p.segment(&conn, TcpFlags::ACK | TcpFlags::PSH).with_payload(request.to_vec()).finalize();
    data.tcp.checksum = bad_checksum(p.rng, &data, test);
    p.send(&conn, data)?;
    let until = p.deadline();
    p.collect(&conn, until)?;
    p.reset(&conn)
}

fn options<T: Transport>(p: &mut Prober<'_, T>, test: TestId, opts: Vec<TcpOption>) -> Result<(), TransportError> {
    let mut conn = p.open(Stage::Primary)?;
    let syn = p.segment(&conn, TcpFlags::SYN).with_options(opts).finalize();
    if p.handshake_syn(&mut conn, syn, Some(test.carriers()))?.is_some() {
        p.reset(&conn)?;
    }
    Ok(())
}

/// Collects data until the connection has been quiet for a while.
fn receive_data<T: Transport>(p: &mut Prober<'_, T>, conn: &Conn) -> Result<(), TransportError> {
    let hard_stop = p.now() + p.cfg.reply_deadline() * 4;
    let mut deadline = p.deadline();
    while let Some(s) = p.recv(conn, deadline.min(hard_stop))? {
        if s.is(TcpFlags::RST) {
            break;
        }
        if !s.payload.is_empty() {
            deadline = p.now() + p.cfg.quiesce();
        }
    }
    Ok(())
}

fn mss<T: Transport>(
    p: &mut Prober<'_, T>,
    test: TestId,
    opts: Vec<TcpOption>,
    request: &[u8],
) -> Result<(), TransportError> {
    let mut conn = p.open(Stage::Primary)?;
    let syn = p.segment(&conn, TcpFlags::SYN).with_options(opts).finalize();
    if p.handshake_syn(&mut conn, syn, Some(test.carriers()))?.is_none() {
        return Ok(());
    }
    let ack = p.segment(&conn, TcpFlags::ACK).finalize();
    p.send(&conn, ack)?;
    let req = p.segment(&conn, TcpFlags::ACK | TcpFlags::PSH).with_payload(request.to_vec()).finalize();
    conn.snd_nxt = conn.snd_nxt.wrapping_add(request.len() as u32);
    p.send(&conn, req)?;
    receive_data(p, &conn)?;
    p.reset(&conn)
}

fn reserved<T: Transport>(p: &mut Prober<'_, T>) -> Result<(), TransportError> {
    let mask = p.cfg.reserved_mask;
    let mut conn = p.open(Stage::Primary)?;
    let mut syn = p.segment(&conn, TcpFlags::SYN);
    syn.tcp.reserved = mask;
    let syn = syn.finalize();
    if p.handshake_syn(&mut conn, syn, Some(TestId::Reserved.carriers()))?.is_none() {
        return Ok(());
    }
    let mut ack = p.segment(&conn, TcpFlags::ACK);
    ack.tcp.reserved = mask;
    let ack_at = p.send(&conn, ack.finalize())?;
    let until = ack_at + p.cfg.retransmit_window();
    p.collect(&conn, until)?;

    let retransmitted = p.ex.received(Stage::Primary).any(|(at, s)| s.is_syn_ack() && at > ack_at.as_micros() as u64);
    if retransmitted && p.cfg.defer_accept_probe {
        let byte = p.segment(&conn, TcpFlags::ACK | TcpFlags::PSH).with_payload(vec![b'\n']).finalize();
        conn.snd_nxt = conn.snd_nxt.wrapping_add(1);
        p.send(&conn, byte)?;
        let until = p.deadline();
        p.collect(&conn, until)?;
    }
    p.reset(&conn)
}

fn urgent<T: Transport>(p: &mut Prober<'_, T>, request: &[u8]) -> Result<(), TransportError> {
    let total = p.cfg.urgent_len;
    let parts = p.cfg.urgent_segments;
    let mut conn = p.open(Stage::Primary)?;
    if !p.connect(&mut conn)? {
        return Ok(());
    }
    let mut payload = request.to_vec();
    payload.resize(total.max(request.len()), b' ');
    payload.truncate(total);
    let start = conn.snd_nxt;
    let end = start.wrapping_add(total as u32);
    let chunk = total.div_ceil(parts);
    for (i, piece) in payload.chunks(chunk).enumerate() {
        let last = (i + 1) * chunk >= total;
        let mut flags = TcpFlags::ACK | TcpFlags::URG;
        if last {
            flags |= TcpFlags::PSH;
        }
        let mut seg = p.segment(&conn, flags).with_payload(piece.to_vec());
        seg.tcp.urgent_pointer = end.wrapping_sub(seg.tcp.seq) as u16;
        let seg = seg.finalize();
        conn.snd_nxt = conn.snd_nxt.wrapping_add(piece.len() as u32);
        p.send(&conn, seg.clone())?;
        if i == 0 {
            p.send_fan(&conn, &seg, TestId::UrgentPointer.carriers())?;
        }
    }
    let deadline = p.deadline();
    while let Some(s) = p.recv(&conn, deadline)? {
        if s.is(TcpFlags::RST) || (s.is(TcpFlags::ACK) && seq_ge(s.tcp.ack, end)) {
            break;
        }
    }
    let reset_by_target = p.ex.got_reset(Stage::Primary);
    let acked =
        p.ex.received(Stage::Primary)
            .any(|(_, s)| s.is(TcpFlags::ACK) && !s.is(TcpFlags::RST) && seq_ge(s.tcp.ack, end));

    // is the host still there?
    let reachable = plain_syn(p, Stage::PostLiveness)?;
    if !acked && !reset_by_target && reachable {
        // a RST to an ACK on the old connection means the host lost its
        // state while we were not looking
        p.close(&conn);
        let old = p.reopen(&conn, Stage::Probe)?;
        let mut probe = p.segment(&old, TcpFlags::ACK);
        probe.tcp.seq = conn.iss;
        p.send(&old, probe.finalize())?;
        let until = p.deadline();
        p.recv(&old, until)?;
        p.reset(&old)?;
    } else if !reset_by_target {
        p.reset(&conn)?;
    }
    Ok(())
}
