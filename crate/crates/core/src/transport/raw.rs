//! Raw IPv4 sockets (Linux).
//!
//! Outbound datagrams go through an `IPPROTO_RAW` socket with the IP header
//! supplied by us. Inbound TCP and ICMP are read from two protocol raw
//! sockets by a background thread and demultiplexed into per-session queues.
//!
//! The host kernel does not know about scanner-owned ports and answers
//! SYN/ACKs with RSTs of its own; those must be filtered locally (for
//! example with an iptables OUTPUT rule dropping RSTs from the probe port
//! range).

use std::collections::{HashMap, VecDeque};
use std::io::{self, Write};
use std::mem;
use std::net::{Ipv4Addr, SocketAddrV4, UdpSocket};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::{ChannelEvent, Demux, Endpoint, EventKind, Pacer, SessionHandle, Transport, TransportError};
use crate::segment::{strip_ipv4_header, Segment};

const IPPROTO_ICMP: i32 = 1;
const RECV_BUF: usize = 65_536;

type FrameLog = Box<dyn Write + Send>;

struct Shared {
    demux: Demux,
    queues: HashMap<SessionHandle, VecDeque<ChannelEvent>>,
    log: Option<FrameLog>,
}

struct Inner {
    state: Mutex<Shared>,
    ready: Condvar,
    started: Instant,
    stop: AtomicBool,
}

impl Inner {
    fn now(&self) -> Duration {
        self.started.elapsed()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Shared> {
        self.state.lock().expect("transport state poisoned")
    }
}

pub struct RawTransport {
    inner: Arc<Inner>,
    send_fd: Arc<OwnedFd>,
    pacer: Pacer,
    receiver: Option<JoinHandle<()>>,
}

fn raw_socket(protocol: i32) -> Result<OwnedFd, TransportError> {
    // SAFETY: plain socket(2) call; the descriptor is owned immediately.
    let fd = unsafe { libc::socket(libc::AF_INET, libc::SOCK_RAW, protocol) };
    if fd < 0 {
        let err = io::Error::last_os_error();
        return Err(match err.raw_os_error() {
            Some(libc::EPERM) | Some(libc::EACCES) => TransportError::Privilege(err),
            _ => TransportError::Io(err),
        });
    }
    // SAFETY: fd is a fresh, valid descriptor nobody else owns.
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

impl RawTransport {
    /// Opens the sockets and starts the receiver thread. Needs CAP_NET_RAW.
    pub fn open(pacer: Pacer) -> Result<RawTransport, TransportError> {
        let send_fd = raw_socket(libc::IPPROTO_RAW)?;
        let tcp_fd = raw_socket(libc::IPPROTO_TCP)?;
        let icmp_fd = raw_socket(IPPROTO_ICMP)?;
        let inner = Arc::new(Inner {
            state: Mutex::new(Shared { demux: Demux::new(), queues: HashMap::new(), log: None }),
            ready: Condvar::new(),
            started: Instant::now(),
            stop: AtomicBool::new(false),
        });
        let rx_inner = Arc::clone(&inner);
        let receiver =
            thread::Builder::new().name("raw-rx".into()).spawn(move || receive_loop(&rx_inner, tcp_fd, icmp_fd))?;
        Ok(RawTransport { inner, send_fd: Arc::new(send_fd), pacer, receiver: Some(receiver) })
    }

    /// Appends every sent and received frame as a hex line to `log`.
    pub fn with_frame_log(self, log: impl Write + Send + 'static) -> Self {
        self.inner.lock().log = Some(Box::new(log));
        self
    }

    /// Source address the kernel would pick to reach `remote`.
    pub fn source_addr_for(remote: Ipv4Addr) -> io::Result<Ipv4Addr> {
        let sock = UdpSocket::bind("0.0.0.0:0")?;
        sock.connect(SocketAddrV4::new(remote, 9))?;
        match sock.local_addr()? {
            std::net::SocketAddr::V4(a) => Ok(*a.ip()),
            std::net::SocketAddr::V6(_) => Err(io::Error::other("no IPv4 route")),
        }
    }

    /// A second handle onto the same sockets, session table and pacer, for
    /// use from another worker thread.
    pub fn handle(&self) -> RawTransport {
        RawTransport {
            inner: Arc::clone(&self.inner),
            send_fd: Arc::clone(&self.send_fd),
            pacer: self.pacer.clone(),
            receiver: None,
        }
    }
}

impl Drop for RawTransport {
    fn drop(&mut self) {
        if let Some(rx) = self.receiver.take() {
            self.inner.stop.store(true, Ordering::Relaxed);
            let _ = rx.join();
        }
    }
}

fn log_frame(shared: &mut Shared, at: Duration, tag: &str, bytes: &[u8]) {
    if let Some(log) = shared.log.as_mut() {
        let _ = writeln!(log, "{:.6} {tag} {}", at.as_secs_f64(), hex::encode(bytes));
    }
}

fn receive_loop(inner: &Inner, tcp_fd: OwnedFd, icmp_fd: OwnedFd) {
    let mut buf = vec![0u8; RECV_BUF];
    let mut fds = [
        libc::pollfd { fd: tcp_fd.as_raw_fd(), events: libc::POLLIN, revents: 0 },
        libc::pollfd { fd: icmp_fd.as_raw_fd(), events: libc::POLLIN, revents: 0 },
    ];
    while !inner.stop.load(Ordering::Relaxed) {
        // SAFETY: fds points at two initialized pollfd structs.
        let n = unsafe { libc::poll(fds.as_mut_ptr(), fds.len() as libc::nfds_t, 100) };
        if n <= 0 {
            continue;
        }
        for pfd in &mut fds {
            if pfd.revents & libc::POLLIN == 0 {
                continue;
            }
            pfd.revents = 0;
            // SAFETY: buf is valid for buf.len() writable bytes.
            let len = unsafe { libc::recv(pfd.fd, buf.as_mut_ptr().cast(), buf.len(), 0) };
            if len <= 0 {
                continue;
            }
            dispatch(inner, &buf[..len as usize]);
        }
    }
}

fn dispatch(inner: &Inner, datagram: &[u8]) {
    let at = inner.now();
    let Ok((ip, body)) = strip_ipv4_header(datagram) else { return };
    let mut shared = inner.lock();
    let routed = match ip.protocol {
        6 => Segment::parse(datagram).ok().and_then(|seg| {
            let h = shared.demux.route_tcp(&seg)?;
            Some((h, EventKind::Tcp(seg)))
        }),
        1 => {
            shared.demux.route_icmp(body).map(|h| (h, EventKind::Icmp { bytes: body.to_vec(), source: ip.source_addr }))
        }
        _ => None,
    };
    if let Some((handle, kind)) = routed {
        log_frame(&mut shared, at, "in", datagram);
        shared.queues.entry(handle).or_default().push_back(ChannelEvent { kind, at });
        inner.ready.notify_all();
    }
}

impl Transport for RawTransport {
    fn open_session(&mut self, local: Endpoint, remote: Endpoint) -> Result<SessionHandle, TransportError> {
        let mut shared = self.inner.lock();
        let h = shared.demux.open(local, remote)?;
        shared.queues.insert(h, VecDeque::new());
        Ok(h)
    }

    fn close_session(&mut self, handle: SessionHandle) {
        let mut shared = self.inner.lock();
        shared.demux.close(handle);
        shared.queues.remove(&handle);
    }

    fn send(&mut self, handle: SessionHandle, segment: &Segment) -> Result<Duration, TransportError> {
        let bytes = segment.serialize()?;
        self.inner.lock().demux.note_sent(handle, segment)?;
        let at = self.pacer.reserve(self.inner.now());
        let now = self.inner.now();
        if at > now {
            thread::sleep(at - now);
        }
        let dst = segment.ip.dest_addr;
        // SAFETY: sockaddr_in is plain old data; zeroed is a valid value.
        let mut sa: libc::sockaddr_in = unsafe { mem::zeroed() };
        sa.sin_family = libc::AF_INET as libc::sa_family_t;
        sa.sin_addr = libc::in_addr { s_addr: u32::from(dst).to_be() };
        // SAFETY: bytes and sa outlive the call; lengths are exact.
        let sent = unsafe {
            libc::sendto(
                self.send_fd.as_raw_fd(),
                bytes.as_ptr().cast(),
                bytes.len(),
                0,
                (&sa as *const libc::sockaddr_in).cast(),
                mem::size_of::<libc::sockaddr_in>() as libc::socklen_t,
            )
        };
        if sent < 0 {
            let err = io::Error::last_os_error();
            return Err(match err.raw_os_error() {
                Some(libc::ENETUNREACH) | Some(libc::EHOSTUNREACH) => TransportError::NoRoute(segment.destination()),
                _ => TransportError::Io(err),
            });
        }
        let sent_at = self.inner.now();
        log_frame(&mut self.inner.lock(), sent_at, "out", &bytes);
        Ok(sent_at)
    }

    fn next_event(&mut self, handle: SessionHandle, deadline: Duration) -> Result<ChannelEvent, TransportError> {
        let mut shared = self.inner.lock();
        loop {
            let queue = shared.queues.get_mut(&handle).ok_or(TransportError::SessionClosed(handle))?;
            if let Some(ev) = queue.pop_front() {
                return Ok(ev);
            }
            let now = self.inner.now();
            if now >= deadline {
                return Ok(ChannelEvent { kind: EventKind::Timeout, at: now });
            }
            shared = self.inner.ready.wait_timeout(shared, deadline - now).expect("transport state poisoned").0;
        }
    }

    fn now(&self) -> Duration {
        self.inner.now()
    }
}
