//! Deterministic discrete-event network.
//!
//! Each device owns one half-duplex radio interface, modeled as a FIFO
//! server with the device's service rate. Sending a frame occupies the
//! sender's interface for `len / rate`; the frame then propagates and
//! occupies each receiver's interface in arrival order. A frame is handed to
//! the receiving node once fully received, and never before the sender has
//! finished plus the propagation delay. On an idle path this gives
//! `len / rate + propagation`.
//!
//! Unicast frames use the slower of the two endpoint rates. Multicast frames
//! are transmitted once at the sender's rate and received by every current
//! group member except the sender.
//!
//! All events are ordered by `(time, sequence)` and every random draw comes
//! from seeded generators, so a fixed configuration replays identically.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap, HashSet};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::time::Duration;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use super::{
    Context, EnergyLedger, InboundId, LinkClass, Node, OutboundId, Transport, TransportError,
};
use crate::http::{HttpRequest, HttpResponse};
use crate::service_registry::fnv1a;

pub type DeviceId = usize;

/// Port on which simulated devices send and receive datagrams.
pub const SIM_DATAGRAM_PORT: u16 = 1900;
/// Port of every simulated device's HTTP listener.
pub const SIM_HTTP_PORT: u16 = 80;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub name: String,
    pub class: String,
    /// Joined to the multicast group at start.
    #[serde(default = "yes")]
    pub member: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSpec {
    pub a: String,
    pub b: String,
    pub delay_ms: f64,
}

/// Simulated network parameters, loadable from a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimNetConfig {
    pub seed: u64,
    /// Probability that a datagram is lost on its way to one recipient.
    /// HTTP frames are never lost.
    pub loss_rate: f64,
    /// How long a request to a dead or unknown host takes to fail.
    pub unreachable_delay_ms: f64,
    pub classes: BTreeMap<String, LinkClass>,
    pub devices: Vec<DeviceSpec>,
    pub links: Vec<LinkSpec>,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        let mut classes = BTreeMap::new();
        classes.insert("lln".to_string(), LinkClass::LLN);
        classes.insert("wifi".to_string(), LinkClass::WIFI);
        SimNetConfig {
            seed: 0,
            loss_rate: 0.0,
            unreachable_delay_ms: 1000.0,
            classes,
            devices: Vec::new(),
            links: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("invalid network config: {0}")]
    Invalid(String),
    #[error("cannot parse network config: {0}")]
    Parse(String),
}

impl SimNetConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, ConfigError> {
        let cfg: SimNetConfig =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return bad(format!("loss_rate {} outside [0, 1]", self.loss_rate));
        }
        if self.unreachable_delay_ms < 0.0 {
            return bad("negative unreachable_delay_ms".into());
        }
        for (name, class) in &self.classes {
            if !(class.rate_bytes_per_ms > 0.0 && class.rate_bytes_per_ms.is_finite()) {
                return bad(format!("class {name}: rate must be positive"));
            }
            if !(class.propagation_ms >= 0.0 && class.propagation_ms.is_finite()) {
                return bad(format!("class {name}: negative propagation delay"));
            }
        }
        for d in &self.devices {
            if !self.classes.contains_key(&d.class) {
                return bad(format!("device {} uses unknown class {}", d.name, d.class));
            }
        }
        for l in &self.links {
            if l.delay_ms.is_nan() || l.delay_ms < 0.0 {
                return bad(format!("link {}-{}: negative delay", l.a, l.b));
            }
        }
        Ok(())
    }

    pub fn class(&self, name: &str) -> Option<LinkClass> {
        self.classes.get(name).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FrameClass {
    Multicast,
    Datagram,
    Request,
    Response,
}

/// One entry of the simulation event log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogRecord {
    Send {
        frame: u64,
        src: DeviceId,
        class: FrameClass,
        bytes: usize,
        at_ns: u64,
        recipients: usize,
        /// First line of the payload.
        summary: String,
    },
    Deliver {
        frame: u64,
        src: DeviceId,
        dst: DeviceId,
        class: FrameClass,
        bytes: usize,
        sent_ns: u64,
        at_ns: u64,
    },
    Drop {
        frame: u64,
        src: DeviceId,
        dst: Option<DeviceId>,
        reason: String,
    },
}

/// Application-send to application-deliver delay in milliseconds.
pub fn end_to_end_delay_ms(sent_ns: u64, delivered_ns: u64) -> f64 {
    (delivered_ns - sent_ns) as f64 / 1e6
}

fn ms_to_ns(ms: f64) -> u64 {
    (ms * 1e6).round() as u64
}

fn airtime_ns(bytes: usize, rate_bytes_per_ms: f64) -> u64 {
    ms_to_ns(bytes as f64 / rate_bytes_per_ms)
}

#[derive(Debug)]
enum FrameKind {
    Multicast,
    Datagram,
    Request(OutboundId),
    Response(OutboundId),
}

impl FrameKind {
    fn class(&self) -> FrameClass {
        match self {
            FrameKind::Multicast => FrameClass::Multicast,
            FrameKind::Datagram => FrameClass::Datagram,
            FrameKind::Request(_) => FrameClass::Request,
            FrameKind::Response(_) => FrameClass::Response,
        }
    }
}

#[derive(Debug)]
struct Frame {
    src: DeviceId,
    kind: FrameKind,
    payload: Vec<u8>,
    sent_at: u64,
    tx_end: u64,
    pending: usize,
}

#[derive(Debug)]
enum EventKind {
    Start(DeviceId),
    Stop(DeviceId),
    SetUp(DeviceId, bool),
    Timer(DeviceId, u64),
    Arrive(u64, DeviceId),
    Deliver(u64, DeviceId),
    Fail(DeviceId, OutboundId, TransportError),
}

#[derive(Debug)]
struct Scheduled {
    at: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.at, self.seq) == (other.at, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

#[derive(Debug, Default)]
struct Inbox {
    datagrams: Vec<(SocketAddr, Vec<u8>)>,
    responses: HashMap<OutboundId, Result<HttpResponse, TransportError>>,
    notifications: Vec<HttpRequest>,
}

struct Device {
    name: String,
    ip: IpAddr,
    class: LinkClass,
    up: bool,
    member: bool,
    radio_free_at: u64,
    next_out: u64,
    next_in: u64,
    pending_in: HashMap<InboundId, (DeviceId, OutboundId)>,
    // Requests issued from outside the node; their responses skip it.
    client_out: HashSet<OutboundId>,
    rng: ChaCha8Rng,
    inbox: Inbox,
}

struct Core {
    cfg: SimNetConfig,
    now: u64,
    seq: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    devices: Vec<Device>,
    by_ip: HashMap<IpAddr, DeviceId>,
    link_delay: HashMap<(DeviceId, DeviceId), u64>,
    frames: HashMap<u64, Frame>,
    next_frame: u64,
    ledger: EnergyLedger,
    log: Vec<LogRecord>,
    loss_rng: ChaCha8Rng,
}

fn summary_of(payload: &[u8]) -> String {
    let end = payload
        .iter()
        .position(|&b| b == b'\r' || b == b'\n')
        .unwrap_or(payload.len())
        .min(96);
    String::from_utf8_lossy(&payload[..end]).into_owned()
}

impl Core {
    fn schedule(&mut self, at: u64, kind: EventKind) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq, kind }));
    }

    fn propagation(&self, a: DeviceId, b: DeviceId) -> u64 {
        let key = (a.min(b), a.max(b));
        self.link_delay.get(&key).copied().unwrap_or_else(|| {
            let pa = self.devices[a].class.propagation_ms;
            let pb = self.devices[b].class.propagation_ms;
            ms_to_ns(pa.max(pb))
        })
    }

    fn datagram_addr(&self, dev: DeviceId) -> SocketAddr {
        SocketAddr::new(self.devices[dev].ip, SIM_DATAGRAM_PORT)
    }

    fn http_addr(&self, dev: DeviceId) -> SocketAddr {
        SocketAddr::new(self.devices[dev].ip, SIM_HTTP_PORT)
    }

    fn transmit(&mut self, src: DeviceId, kind: FrameKind, payload: Vec<u8>, dsts: Vec<DeviceId>) {
        let id = self.next_frame;
        self.next_frame += 1;
        let len = payload.len();
        let src_rate = self.devices[src].class.rate_bytes_per_ms;
        let rate = match (&kind, dsts.as_slice()) {
            (FrameKind::Multicast, _) | (_, []) => src_rate,
            (_, [dst, ..]) => src_rate.min(self.devices[*dst].class.rate_bytes_per_ms),
        };
        let start = self.now.max(self.devices[src].radio_free_at);
        let tx_end = start + airtime_ns(len, rate);
        self.devices[src].radio_free_at = tx_end;
        self.ledger.record_tx(src, len, dsts.len());
        self.log.push(LogRecord::Send {
            frame: id,
            src,
            class: kind.class(),
            bytes: len,
            at_ns: self.now,
            recipients: dsts.len(),
            summary: summary_of(&payload),
        });
        let lossy = matches!(kind, FrameKind::Multicast | FrameKind::Datagram);
        let mut pending = 0;
        for dst in dsts {
            if lossy && self.cfg.loss_rate > 0.0 && self.loss_rng.gen_bool(self.cfg.loss_rate) {
                self.log.push(LogRecord::Drop {
                    frame: id,
                    src,
                    dst: Some(dst),
                    reason: "loss".into(),
                });
                continue;
            }
            let arrive = start + self.propagation(src, dst);
            self.schedule(arrive, EventKind::Arrive(id, dst));
            pending += 1;
        }
        if pending > 0 {
            self.frames.insert(
                id,
                Frame {
                    src,
                    kind,
                    payload,
                    sent_at: self.now,
                    tx_end,
                    pending,
                },
            );
        }
    }

    fn multicast_from(&mut self, src: DeviceId, payload: Vec<u8>) {
        let dsts = self
            .devices
            .iter()
            .enumerate()
            .filter(|(i, d)| *i != src && d.up && d.member)
            .map(|(i, _)| i)
            .collect();
        self.transmit(src, FrameKind::Multicast, payload, dsts);
    }

    fn datagram_from(&mut self, src: DeviceId, to: SocketAddr, payload: Vec<u8>) {
        let dsts = match self.by_ip.get(&to.ip()) {
            Some(&dst) if dst != src => vec![dst],
            _ => Vec::new(),
        };
        self.transmit(src, FrameKind::Datagram, payload, dsts);
    }

    fn request_from(&mut self, src: DeviceId, to: SocketAddr, req: HttpRequest) -> OutboundId {
        let dev = &mut self.devices[src];
        let out = OutboundId(dev.next_out);
        dev.next_out += 1;
        match self.by_ip.get(&to.ip()).copied() {
            Some(dst) if dst != src && self.devices[dst].up => {
                self.transmit(src, FrameKind::Request(out), req.encode(), vec![dst]);
            }
            _ => {
                let at = self.now + ms_to_ns(self.cfg.unreachable_delay_ms);
                self.schedule(
                    at,
                    EventKind::Fail(src, out, TransportError::Unreachable(to.to_string())),
                );
            }
        }
        out
    }

    fn respond_from(&mut self, src: DeviceId, id: InboundId, resp: HttpResponse) {
        if let Some((requester, out)) = self.devices[src].pending_in.remove(&id) {
            self.transmit(src, FrameKind::Response(out), resp.encode(), vec![requester]);
        }
    }

    fn finish_frame(&mut self, id: u64) {
        if let Some(f) = self.frames.get_mut(&id) {
            f.pending -= 1;
            if f.pending == 0 {
                self.frames.remove(&id);
            }
        }
    }

    /// A frame whose receiver is down: requests fail back to their issuer.
    fn drop_frame(&mut self, id: u64, dst: DeviceId) {
        let Some(frame) = self.frames.get(&id) else { return };
        let src = frame.src;
        let failed = match frame.kind {
            FrameKind::Request(out) => Some(out),
            _ => None,
        };
        self.log.push(LogRecord::Drop {
            frame: id,
            src,
            dst: Some(dst),
            reason: "receiver down".into(),
        });
        if let Some(out) = failed {
            let at = self.now + ms_to_ns(self.cfg.unreachable_delay_ms);
            let addr = self.http_addr(dst).to_string();
            self.schedule(at, EventKind::Fail(src, out, TransportError::Unreachable(addr)));
        }
        self.finish_frame(id);
    }

    fn arrive(&mut self, id: u64, dst: DeviceId) {
        if !self.devices[dst].up {
            self.drop_frame(id, dst);
            return;
        }
        let Some(frame) = self.frames.get(&id) else { return };
        let src = frame.src;
        let rate = self.devices[src]
            .class
            .rate_bytes_per_ms
            .min(self.devices[dst].class.rate_bytes_per_ms);
        let start = self.now.max(self.devices[dst].radio_free_at);
        let end = (start + airtime_ns(frame.payload.len(), rate))
            .max(frame.tx_end + self.propagation(src, dst));
        self.devices[dst].radio_free_at = end;
        self.schedule(end, EventKind::Deliver(id, dst));
    }
}

/// What a delivery asks the simulator to do next.
enum Dispatch {
    Datagram(SocketAddr, Vec<u8>),
    Request(InboundId, SocketAddr, HttpRequest),
    Response(OutboundId, Result<HttpResponse, TransportError>),
}

struct SimCx<'a> {
    core: &'a mut Core,
    dev: DeviceId,
}

impl Context for SimCx<'_> {
    fn now(&self) -> Duration {
        Duration::from_nanos(self.core.now)
    }

    fn http_addr(&self) -> SocketAddr {
        self.core.http_addr(self.dev)
    }

    fn send_multicast(&mut self, payload: Vec<u8>) {
        self.core.multicast_from(self.dev, payload);
    }

    fn send_datagram(&mut self, to: SocketAddr, payload: Vec<u8>) {
        self.core.datagram_from(self.dev, to, payload);
    }

    fn request(&mut self, to: SocketAddr, req: HttpRequest) -> OutboundId {
        self.core.request_from(self.dev, to, req)
    }

    fn respond(&mut self, id: InboundId, resp: HttpResponse) {
        self.core.respond_from(self.dev, id, resp);
    }

    fn set_timer(&mut self, after: Duration, tag: u64) {
        let at = self.core.now + after.as_nanos() as u64;
        self.core.schedule(at, EventKind::Timer(self.dev, tag));
    }

    fn set_multicast_membership(&mut self, joined: bool) {
        self.core.devices[self.dev].member = joined;
    }

    fn rng(&mut self) -> &mut dyn RngCore {
        &mut self.core.devices[self.dev].rng
    }
}

/// The simulated network plus the nodes attached to its devices.
///
/// Devices without a node act as external endpoints: datagrams and
/// responses addressed to them are queued for a [`SimClient`], and HTTP
/// requests they receive are recorded as notifications and answered `200`.
pub struct SimNet {
    core: Core,
    nodes: Vec<Option<Box<dyn Node>>>,
}

impl SimNet {
    pub fn new(cfg: SimNetConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let specs = cfg.devices.clone();
        let links = cfg.links.clone();
        let loss_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_1055);
        let mut net = SimNet {
            core: Core {
                cfg,
                now: 0,
                seq: 0,
                queue: BinaryHeap::new(),
                devices: Vec::new(),
                by_ip: HashMap::new(),
                link_delay: HashMap::new(),
                frames: HashMap::new(),
                next_frame: 0,
                ledger: EnergyLedger::new(),
                log: Vec::new(),
                loss_rng,
            },
            nodes: Vec::new(),
        };
        for spec in specs {
            let class = net.core.cfg.class(&spec.class).expect("validated");
            net.add_device(&spec.name, class, spec.member);
        }
        for link in links {
            let a = net.device(&link.a);
            let b = net.device(&link.b);
            match (a, b) {
                (Some(a), Some(b)) => net.set_link_delay(a, b, link.delay_ms),
                _ => {
                    return Err(ConfigError::Invalid(format!(
                        "link {}-{} names an unknown device",
                        link.a, link.b
                    )))
                }
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &SimNetConfig {
        &self.core.cfg
    }

    /// Adds an external device that is up immediately.
    pub fn add_device(&mut self, name: &str, class: LinkClass, member: bool) -> DeviceId {
        let id = self.core.devices.len();
        let ip = IpAddr::V4(Ipv4Addr::new(10, 0, (id / 250) as u8, (id % 250 + 1) as u8));
        let mut seed_bytes = self.core.cfg.seed.to_le_bytes().to_vec();
        seed_bytes.extend_from_slice(name.as_bytes());
        self.core.devices.push(Device {
            name: name.to_string(),
            ip,
            class,
            up: true,
            member,
            radio_free_at: 0,
            next_out: 0,
            next_in: 0,
            pending_in: HashMap::new(),
            rng: ChaCha8Rng::seed_from_u64(fnv1a(&seed_bytes)),
            client_out: HashSet::new(),
            inbox: Inbox::default(),
        });
        self.core.by_ip.insert(ip, id);
        self.nodes.push(None);
        id
    }

    /// Adds a device running `node`. The device is down until `start_at`,
    /// when the node's `start` runs.
    pub fn add_node(
        &mut self,
        name: &str,
        class: LinkClass,
        member: bool,
        node: Box<dyn Node>,
        start_at: Duration,
    ) -> DeviceId {
        let id = self.add_device(name, class, member);
        self.attach_node(id, node, start_at);
        id
    }

    pub fn attach_node(&mut self, dev: DeviceId, node: Box<dyn Node>, start_at: Duration) {
        self.core.devices[dev].up = false;
        self.nodes[dev] = Some(node);
        self.core
            .schedule(start_at.as_nanos() as u64, EventKind::Start(dev));
    }

    pub fn set_link_delay(&mut self, a: DeviceId, b: DeviceId, delay_ms: f64) {
        self.core
            .link_delay
            .insert((a.min(b), a.max(b)), ms_to_ns(delay_ms));
    }

    /// Asks the node on `dev` to cease periodic activity at `at`.
    pub fn schedule_stop(&mut self, dev: DeviceId, at: Duration) {
        self.core.schedule(at.as_nanos() as u64, EventKind::Stop(dev));
    }

    /// Takes `dev` off the network (or brings it back) at `at`.
    pub fn schedule_up(&mut self, dev: DeviceId, at: Duration, up: bool) {
        self.core
            .schedule(at.as_nanos() as u64, EventKind::SetUp(dev, up));
    }

    pub fn now(&self) -> Duration {
        Duration::from_nanos(self.core.now)
    }

    pub fn now_ns(&self) -> u64 {
        self.core.now
    }

    pub fn ledger(&self) -> &EnergyLedger {
        &self.core.ledger
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.core.log
    }

    pub fn take_log(&mut self) -> Vec<LogRecord> {
        std::mem::take(&mut self.core.log)
    }

    pub fn device_count(&self) -> usize {
        self.core.devices.len()
    }

    pub fn device(&self, name: &str) -> Option<DeviceId> {
        self.core.devices.iter().position(|d| d.name == name)
    }

    pub fn device_name(&self, dev: DeviceId) -> &str {
        &self.core.devices[dev].name
    }

    pub fn ip(&self, dev: DeviceId) -> IpAddr {
        self.core.devices[dev].ip
    }

    pub fn http_addr(&self, dev: DeviceId) -> SocketAddr {
        self.core.http_addr(dev)
    }

    pub fn datagram_addr(&self, dev: DeviceId) -> SocketAddr {
        self.core.datagram_addr(dev)
    }

    pub fn is_member(&self, dev: DeviceId) -> bool {
        self.core.devices[dev].member
    }

    pub fn node<N: Node>(&self, dev: DeviceId) -> Option<&N> {
        self.nodes.get(dev)?.as_deref()?.downcast_ref::<N>()
    }

    /// Runs `f` against the node on `dev` with a live context, as if the
    /// node were handling an event at the current time.
    pub fn with_node<N: Node, R>(
        &mut self,
        dev: DeviceId,
        f: impl FnOnce(&mut N, &mut dyn Context) -> R,
    ) -> Option<R> {
        let mut node = self.nodes.get_mut(dev)?.take()?;
        let result = node.downcast_mut::<N>().map(|n| {
            let mut cx = SimCx {
                core: &mut self.core,
                dev,
            };
            f(n, &mut cx)
        });
        self.nodes[dev] = Some(node);
        result
    }

    fn dispatch(&mut self, dev: DeviceId, f: impl FnOnce(&mut dyn Node, &mut dyn Context)) -> bool {
        match self.nodes[dev].take() {
            Some(mut node) => {
                let mut cx = SimCx {
                    core: &mut self.core,
                    dev,
                };
                f(node.as_mut(), &mut cx);
                self.nodes[dev] = Some(node);
                true
            }
            None => false,
        }
    }

    /// Processes the next event, if any. Returns false when the queue is
    /// empty.
    pub fn step(&mut self) -> bool {
        let Some(Reverse(ev)) = self.core.queue.pop() else {
            return false;
        };
        self.core.now = ev.at;
        match ev.kind {
            EventKind::Start(dev) => {
                self.core.devices[dev].up = true;
                self.dispatch(dev, |n, cx| n.start(cx));
            }
            EventKind::Stop(dev) => {
                self.dispatch(dev, |n, cx| n.stop(cx));
            }
            EventKind::SetUp(dev, up) => {
                self.core.devices[dev].up = up;
                if !up {
                    self.core.devices[dev].pending_in.clear();
                }
            }
            EventKind::Timer(dev, tag) => {
                if self.core.devices[dev].up {
                    self.dispatch(dev, |n, cx| n.on_timer(cx, tag));
                }
            }
            EventKind::Arrive(id, dst) => self.core.arrive(id, dst),
            EventKind::Deliver(id, dst) => self.deliver(id, dst),
            EventKind::Fail(dev, out, err) => {
                self.hand_response(dev, out, Err(err));
            }
        }
        true
    }

    fn deliver(&mut self, id: u64, dst: DeviceId) {
        if !self.core.devices[dst].up {
            self.core.drop_frame(id, dst);
            return;
        }
        let core = &mut self.core;
        let Some(frame) = core.frames.get(&id) else { return };
        let (src, bytes, sent_at) = (frame.src, frame.payload.len(), frame.sent_at);
        core.ledger.record_rx(dst, bytes);
        core.log.push(LogRecord::Deliver {
            frame: id,
            src,
            dst,
            class: frame.kind.class(),
            bytes,
            sent_ns: sent_at,
            at_ns: core.now,
        });
        let dispatch = match frame.kind {
            FrameKind::Multicast | FrameKind::Datagram => {
                Dispatch::Datagram(core.datagram_addr(src), frame.payload.clone())
            }
            FrameKind::Request(out) => match HttpRequest::decode(&frame.payload) {
                Ok(req) => {
                    let d = &mut core.devices[dst];
                    let inbound = InboundId(d.next_in);
                    d.next_in += 1;
                    d.pending_in.insert(inbound, (src, out));
                    Dispatch::Request(inbound, core.http_addr(src), req)
                }
                Err(_) => {
                    core.finish_frame(id);
                    core.transmit(
                        dst,
                        FrameKind::Response(out),
                        HttpResponse::new(400).encode(),
                        vec![src],
                    );
                    return;
                }
            },
            FrameKind::Response(out) => Dispatch::Response(
                out,
                HttpResponse::decode(&frame.payload)
                    .map_err(|e| TransportError::Protocol(e.to_string())),
            ),
        };
        core.finish_frame(id);
        match dispatch {
            Dispatch::Datagram(from, payload) => {
                if !self.dispatch(dst, |n, cx| n.on_datagram(cx, from, &payload)) {
                    self.core.devices[dst].inbox.datagrams.push((from, payload));
                }
            }
            Dispatch::Request(inbound, from, req) => {
                let mut req = Some(req);
                let handled =
                    self.dispatch(dst, |n, cx| n.on_request(cx, inbound, from, req.take().unwrap()));
                if !handled {
                    self.core.devices[dst]
                        .inbox
                        .notifications
                        .push(req.take().unwrap());
                    self.core
                        .respond_from(dst, inbound, HttpResponse::new(200));
                }
            }
            Dispatch::Response(out, result) => self.hand_response(dst, out, result),
        }
    }

    fn hand_response(
        &mut self,
        dev: DeviceId,
        out: OutboundId,
        result: Result<HttpResponse, TransportError>,
    ) {
        let mut result = Some(result);
        let handled = !self.core.devices[dev].client_out.remove(&out)
            && self.dispatch(dev, |n, cx| n.on_response(cx, out, result.take().unwrap()));
        if !handled {
            self.core.devices[dev]
                .inbox
                .responses
                .insert(out, result.take().unwrap());
        }
    }

    /// Processes every event scheduled at or before `t_end`, then advances
    /// the clock to `t_end`. Returns the number of events processed.
    pub fn run_until(&mut self, t_end: Duration) -> u64 {
        let end = (t_end.as_nanos() as u64).max(self.core.now);
        let mut count = 0;
        while self
            .core
            .queue
            .peek()
            .is_some_and(|Reverse(ev)| ev.at <= end)
        {
            self.step();
            count += 1;
        }
        self.core.now = end;
        count
    }

    /// Blocking client view of a device. Responses to its requests bypass
    /// any node on the device.
    pub fn client(&mut self, dev: DeviceId) -> SimClient<'_> {
        SimClient {
            net: self,
            dev,
            timeout: Duration::from_secs(60),
        }
    }

    /// Sends a multicast from an external device.
    pub fn multicast_from(&mut self, dev: DeviceId, payload: Vec<u8>) {
        self.core.multicast_from(dev, payload);
    }

    pub fn request_from(&mut self, dev: DeviceId, to: SocketAddr, req: HttpRequest) -> OutboundId {
        let out = self.core.request_from(dev, to, req);
        self.core.devices[dev].client_out.insert(out);
        out
    }

    pub fn take_datagrams(&mut self, dev: DeviceId) -> Vec<(SocketAddr, Vec<u8>)> {
        std::mem::take(&mut self.core.devices[dev].inbox.datagrams)
    }

    pub fn take_response(
        &mut self,
        dev: DeviceId,
        out: OutboundId,
    ) -> Option<Result<HttpResponse, TransportError>> {
        self.core.devices[dev].inbox.responses.remove(&out)
    }

    pub fn take_notifications(&mut self, dev: DeviceId) -> Vec<HttpRequest> {
        std::mem::take(&mut self.core.devices[dev].inbox.notifications)
    }
}

/// [`Transport`] for a simulated device. Each blocking call
/// advances the simulation until the call can complete.
pub struct SimClient<'a> {
    net: &'a mut SimNet,
    dev: DeviceId,
    timeout: Duration,
}

impl SimClient<'_> {
    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn net(&mut self) -> &mut SimNet {
        self.net
    }
}

impl Transport for SimClient<'_> {
    fn now(&self) -> Duration {
        self.net.now()
    }

    fn request(&mut self, to: SocketAddr, req: HttpRequest) -> Result<HttpResponse, TransportError> {
        let out = self.net.request_from(self.dev, to, req);
        let deadline = self.net.now() + self.timeout;
        loop {
            if let Some(result) = self.net.take_response(self.dev, out) {
                return result;
            }
            let next_due = self
                .net
                .core
                .queue
                .peek()
                .is_some_and(|Reverse(ev)| ev.at <= deadline.as_nanos() as u64);
            if !next_due {
                self.net.run_until(deadline);
                return Err(TransportError::Timeout);
            }
            self.net.step();
        }
    }

    fn search(
        &mut self,
        payload: &[u8],
        wait: Duration,
    ) -> Result<Vec<(SocketAddr, Vec<u8>)>, TransportError> {
        self.net.take_datagrams(self.dev);
        self.net.multicast_from(self.dev, payload.to_vec());
        let until = self.net.now() + wait;
        self.net.run_until(until);
        Ok(self.net.take_datagrams(self.dev))
    }

    fn pause(&mut self, duration: Duration) {
        let until = self.net.now() + duration;
        self.net.run_until(until);
    }

    fn callback_url(&mut self) -> Result<Url, TransportError> {
        let base = super::http_base(self.net.http_addr(self.dev));
        base.join("notify")
            .map_err(|e| TransportError::Protocol(e.to_string()))
    }

    fn take_notifications(&mut self) -> Vec<HttpRequest> {
        self.net.take_notifications(self.dev)
    }
}
