//! Nodes and clients on real sockets.
//!
//! A node runs on its own thread. Datagram receivers, the TCP acceptor and
//! outbound HTTP exchanges each run on helper threads and feed one channel,
//! so the node itself sees events one at a time.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};
use std::io;
use std::net::{IpAddr, Ipv4Addr, SocketAddr, SocketAddrV4, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use socket2::{Domain, Protocol, Socket, Type};
use url::Url;

use super::{http_base, Context, InboundId, Node, OutboundId, Transport, TransportError};
use crate::http::{self, HttpRequest, HttpResponse};
use crate::ssdp::MAX_DATAGRAM;

const POLL: Duration = Duration::from_millis(100);

/// Socket settings shared by nodes and clients.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    pub group: SocketAddrV4,
    /// Interface used for multicast and as the advertised host address.
    pub interface: Ipv4Addr,
    pub ttl: u32,
    pub request_timeout: Duration,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            group: SocketAddrV4::new(Ipv4Addr::new(239, 255, 255, 250), 1900),
            interface: Ipv4Addr::LOCALHOST,
            ttl: 2,
            request_timeout: Duration::from_secs(5),
        }
    }
}

fn multicast_receiver(cfg: &NetConfig) -> io::Result<UdpSocket> {
    let socket = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
    socket.set_reuse_address(true)?;
    #[cfg(unix)]
    socket.set_reuse_port(true)?;
    let bind = SocketAddrV4::new(Ipv4Addr::UNSPECIFIED, cfg.group.port());
    socket.bind(&bind.into())?;
    socket.join_multicast_v4(cfg.group.ip(), &cfg.interface)?;
    socket.set_multicast_loop_v4(true)?;
    let socket: UdpSocket = socket.into();
    socket.set_read_timeout(Some(POLL))?;
    Ok(socket)
}

fn unicast_socket(cfg: &NetConfig) -> io::Result<UdpSocket> {
    let socket = Socket::new(Domain::IPV4, Type::DGRAM, Some(Protocol::UDP))?;
    socket.bind(&SocketAddrV4::new(cfg.interface, 0).into())?;
    socket.set_multicast_if_v4(&cfg.interface)?;
    socket.set_multicast_ttl_v4(cfg.ttl)?;
    socket.set_multicast_loop_v4(true)?;
    let socket: UdpSocket = socket.into();
    socket.set_read_timeout(Some(POLL))?;
    Ok(socket)
}

/// One blocking HTTP exchange over a fresh connection.
pub fn http_exchange(
    to: SocketAddr,
    req: &HttpRequest,
    timeout: Duration,
) -> Result<HttpResponse, TransportError> {
    let mut stream = TcpStream::connect_timeout(&to, timeout)?;
    stream.set_read_timeout(Some(timeout))?;
    stream.set_write_timeout(Some(timeout))?;
    http::write_all(&mut stream, &req.encode())?;
    HttpResponse::read_from(&mut stream).map_err(|e| match e {
        http::HttpError::Io(io) => io.into(),
        other => TransportError::Protocol(other.to_string()),
    })
}

type Invoke<N> = Box<dyn FnOnce(&mut N, &mut dyn Context) + Send>;

enum Event<N> {
    Datagram(SocketAddr, Vec<u8>),
    Request(SocketAddr, HttpRequest, Sender<HttpResponse>),
    Response(OutboundId, Result<HttpResponse, TransportError>),
    Invoke(Invoke<N>),
    Stop,
    Shutdown,
}

struct RealCx<'a, N> {
    started: Instant,
    cfg: &'a NetConfig,
    http_addr: SocketAddr,
    sock: &'a UdpSocket,
    mrx: &'a UdpSocket,
    joined: &'a mut bool,
    tx: &'a Sender<Event<N>>,
    pending: &'a mut HashMap<InboundId, Sender<HttpResponse>>,
    timers: &'a mut BinaryHeap<Reverse<(Instant, u64, u64)>>,
    timer_seq: &'a mut u64,
    next_out: &'a mut u64,
    rng: &'a mut ChaCha8Rng,
}

impl<N: Send + 'static> Context for RealCx<'_, N> {
    fn now(&self) -> Duration {
        self.started.elapsed()
    }

    fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    fn send_multicast(&mut self, payload: Vec<u8>) {
        if let Err(e) = self.sock.send_to(&payload, self.cfg.group) {
            log::warn!("multicast send failed: {e}");
        }
    }

    fn send_datagram(&mut self, to: SocketAddr, payload: Vec<u8>) {
        if let Err(e) = self.sock.send_to(&payload, to) {
            log::warn!("datagram to {to} failed: {e}");
        }
    }

    fn request(&mut self, to: SocketAddr, req: HttpRequest) -> OutboundId {
        let id = OutboundId(*self.next_out);
        *self.next_out += 1;
        let tx = self.tx.clone();
        let timeout = self.cfg.request_timeout;
        thread::spawn(move || {
            let result = http_exchange(to, &req, timeout);
            let _ = tx.send(Event::Response(id, result));
        });
        id
    }

    fn respond(&mut self, id: InboundId, resp: HttpResponse) {
        if let Some(reply) = self.pending.remove(&id) {
            let _ = reply.send(resp);
        }
    }

    fn set_timer(&mut self, after: Duration, tag: u64) {
        *self.timer_seq += 1;
        self.timers
            .push(Reverse((Instant::now() + after, *self.timer_seq, tag)));
    }

    fn set_multicast_membership(&mut self, joined: bool) {
        if joined == *self.joined {
            return;
        }
        let group = self.cfg.group.ip();
        let result = if joined {
            self.mrx.join_multicast_v4(group, &self.cfg.interface)
        } else {
            self.mrx.leave_multicast_v4(group, &self.cfg.interface)
        };
        match result {
            Ok(()) => *self.joined = joined,
            Err(e) => log::warn!("multicast membership change failed: {e}"),
        }
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        self.rng
    }
}

/// Handle to a node running on real sockets.
pub struct NodeHandle<N> {
    tx: Sender<Event<N>>,
    http_addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl<N: Node + Send> NodeHandle<N> {
    /// Binds sockets and starts `node`. `http_bind` may use port 0.
    pub fn spawn(node: N, cfg: NetConfig, http_bind: SocketAddr) -> io::Result<Self> {
        let mrx = multicast_receiver(&cfg)?;
        let sock = unicast_socket(&cfg)?;
        let own_addr = sock.local_addr()?;
        let listener = TcpListener::bind(http_bind)?;
        listener.set_nonblocking(true)?;
        let mut http_addr = listener.local_addr()?;
        if http_addr.ip().is_unspecified() {
            http_addr.set_ip(IpAddr::V4(cfg.interface));
        }

        let (tx, rx) = mpsc::channel::<Event<N>>();
        let shutdown = Arc::new(AtomicBool::new(false));
        let mut threads = Vec::new();

        for socket in [mrx.try_clone()?, sock.try_clone()?] {
            let tx = tx.clone();
            let shutdown = shutdown.clone();
            threads.push(thread::spawn(move || {
                let mut buf = vec![0u8; MAX_DATAGRAM + 1];
                while !shutdown.load(Ordering::Relaxed) {
                    match socket.recv_from(&mut buf) {
                        Ok((n, from)) if from != own_addr => {
                            if tx.send(Event::Datagram(from, buf[..n].to_vec())).is_err() {
                                break;
                            }
                        }
                        Ok(_) => {}
                        Err(e)
                            if matches!(
                                e.kind(),
                                io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                            ) => {}
                        Err(e) => {
                            log::warn!("datagram receive failed: {e}");
                            break;
                        }
                    }
                }
            }));
        }

        {
            let tx = tx.clone();
            let shutdown = shutdown.clone();
            let timeout = cfg.request_timeout;
            threads.push(thread::spawn(move || {
                while !shutdown.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((stream, from)) => {
                            let tx = tx.clone();
                            thread::spawn(move || serve_connection(stream, from, tx, timeout));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
                        Err(e) => {
                            log::warn!("accept failed: {e}");
                            thread::sleep(POLL);
                        }
                    }
                }
            }));
        }

        {
            let tx2 = tx.clone();
            threads.push(thread::spawn(move || {
                event_loop(node, cfg, http_addr, sock, mrx, tx2, rx);
            }));
        }

        Ok(NodeHandle {
            tx,
            http_addr,
            shutdown,
            threads,
        })
    }

    pub fn http_addr(&self) -> SocketAddr {
        self.http_addr
    }

    pub fn base_url(&self) -> Url {
        http_base(self.http_addr)
    }

    /// Runs `f` on the node's thread and waits for its result.
    pub fn invoke<R: Send + 'static>(
        &self,
        f: impl FnOnce(&mut N, &mut dyn Context) -> R + Send + 'static,
    ) -> Option<R> {
        let (rtx, rrx) = mpsc::channel();
        self.tx
            .send(Event::Invoke(Box::new(move |n, cx| {
                let _ = rtx.send(f(n, cx));
            })))
            .ok()?;
        rrx.recv().ok()
    }

    /// Calls the node's `stop` hook; the node keeps serving requests.
    pub fn stop(&self) {
        let _ = self.tx.send(Event::Stop);
    }

    /// Stops all threads and closes the sockets.
    pub fn shutdown(self) {}
}

impl<N> Drop for NodeHandle<N> {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        let _ = self.tx.send(Event::Shutdown);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

fn serve_connection<N>(mut stream: TcpStream, from: SocketAddr, tx: Sender<Event<N>>, timeout: Duration) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(timeout));
    let resp = match HttpRequest::read_from(&mut stream) {
        Ok(req) => {
            let (rtx, rrx) = mpsc::channel();
            if tx.send(Event::Request(from, req, rtx)).is_err() {
                return;
            }
            match rrx.recv_timeout(timeout * 6) {
                Ok(resp) => resp,
                Err(_) => HttpResponse::new(503),
            }
        }
        Err(_) => HttpResponse::new(400),
    };
    let _ = http::write_all(&mut stream, &resp.encode());
}

fn event_loop<N: Node + Send>(
    mut node: N,
    cfg: NetConfig,
    http_addr: SocketAddr,
    sock: UdpSocket,
    mrx: UdpSocket,
    tx: Sender<Event<N>>,
    rx: Receiver<Event<N>>,
) {
    let started = Instant::now();
    let mut joined = true;
    let mut pending = HashMap::new();
    let mut timers = BinaryHeap::new();
    let mut timer_seq = 0;
    let mut next_out = 0;
    let mut next_in = 0;
    let mut rng = ChaCha8Rng::from_entropy();

    macro_rules! cx {
        () => {
            &mut RealCx {
                started,
                cfg: &cfg,
                http_addr,
                sock: &sock,
                mrx: &mrx,
                joined: &mut joined,
                tx: &tx,
                pending: &mut pending,
                timers: &mut timers,
                timer_seq: &mut timer_seq,
                next_out: &mut next_out,
                rng: &mut rng,
            }
        };
    }

    node.start(cx!());
    loop {
        let now = Instant::now();
        while let Some(&Reverse((due, _, tag))) = timers.peek() {
            if due > now {
                break;
            }
            timers.pop();
            node.on_timer(cx!(), tag);
        }
        let wait = timers
            .peek()
            .map(|Reverse((due, _, _))| due.saturating_duration_since(Instant::now()))
            .unwrap_or(POLL * 10);
        let event = match rx.recv_timeout(wait) {
            Ok(ev) => ev,
            Err(RecvTimeoutError::Timeout) => continue,
            Err(RecvTimeoutError::Disconnected) => return,
        };
        match event {
            Event::Datagram(from, payload) => node.on_datagram(cx!(), from, &payload),
            Event::Request(from, req, reply) => {
                let id = InboundId(next_in);
                next_in += 1;
                pending.insert(id, reply);
                node.on_request(cx!(), id, from, req);
            }
            Event::Response(id, result) => node.on_response(cx!(), id, result),
            Event::Invoke(f) => f(&mut node, cx!()),
            Event::Stop => node.stop(cx!()),
            Event::Shutdown => return,
        }
    }
}

/// Blocking [`Transport`] over real sockets.
pub struct UdpHttpClient {
    cfg: NetConfig,
    started: Instant,
    listener: Option<NotificationListener>,
}

struct NotificationListener {
    url: Url,
    received: Arc<Mutex<Vec<HttpRequest>>>,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl Drop for NotificationListener {
    fn drop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl UdpHttpClient {
    pub fn new(cfg: NetConfig) -> Self {
        UdpHttpClient {
            cfg,
            started: Instant::now(),
            listener: None,
        }
    }

    fn start_listener(&self) -> io::Result<NotificationListener> {
        let listener = TcpListener::bind(SocketAddr::new(IpAddr::V4(self.cfg.interface), 0))?;
        listener.set_nonblocking(true)?;
        let url = http_base(listener.local_addr()?)
            .join("notify")
            .expect("static path");
        let received = Arc::new(Mutex::new(Vec::new()));
        let shutdown = Arc::new(AtomicBool::new(false));
        let thread = {
            let received = received.clone();
            let shutdown = shutdown.clone();
            let timeout = self.cfg.request_timeout;
            thread::spawn(move || {
                while !shutdown.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((mut stream, _)) => {
                            let _ = stream.set_nonblocking(false);
                            let _ = stream.set_read_timeout(Some(timeout));
                            let resp = match HttpRequest::read_from(&mut stream) {
                                Ok(req) => {
                                    received.lock().expect("poisoned").push(req);
                                    HttpResponse::new(200)
                                }
                                Err(_) => HttpResponse::new(400),
                            };
                            let _ = http::write_all(&mut stream, &resp.encode());
                        }
                        Err(_) => thread::sleep(Duration::from_millis(5)),
                    }
                }
            })
        };
        Ok(NotificationListener {
            url,
            received,
            shutdown,
            thread: Some(thread),
        })
    }
}

impl Transport for UdpHttpClient {
    fn now(&self) -> Duration {
        self.started.elapsed()
    }

    fn request(&mut self, to: SocketAddr, req: HttpRequest) -> Result<HttpResponse, TransportError> {
        http_exchange(to, &req, self.cfg.request_timeout)
    }

    fn search(
        &mut self,
        payload: &[u8],
        wait: Duration,
    ) -> Result<Vec<(SocketAddr, Vec<u8>)>, TransportError> {
        let sock = unicast_socket(&self.cfg)?;
        sock.send_to(payload, self.cfg.group)?;
        let deadline = Instant::now() + wait;
        let mut out = Vec::new();
        let mut buf = vec![0u8; MAX_DATAGRAM + 1];
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                break;
            }
            sock.set_read_timeout(Some(left.min(POLL)))?;
            match sock.recv_from(&mut buf) {
                Ok((n, from)) => out.push((from, buf[..n].to_vec())),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(out)
    }

    fn pause(&mut self, duration: Duration) {
        thread::sleep(duration);
    }

    fn callback_url(&mut self) -> Result<Url, TransportError> {
        if self.listener.is_none() {
            self.listener = Some(self.start_listener()?);
        }
        Ok(self.listener.as_ref().expect("just set").url.clone())
    }

    fn take_notifications(&mut self) -> Vec<HttpRequest> {
        match &self.listener {
            Some(l) => std::mem::take(&mut *l.received.lock().expect("poisoned")),
            None => Vec::new(),
        }
    }
}
