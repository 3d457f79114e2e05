//! Control point: discovery, description, control with redirect following,
//! and event subscription.
//!
//! [`ControlPoint`] is the blocking client used by the CLI and tests. The
//! experiment roles [`DiscoveryLoop`] and [`TargetedCp`] are nodes that do
//! the same work from inside a network runtime. Both share [`Invocation`],
//! which follows redirects without doing any I/O itself.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::time::Duration;

use rand::Rng;
use serde_json::{Map, Value};
use thiserror::Error;
use url::Url;

use crate::descriptions::{
    decode_description, fetch_description, fetch_description_bytes, DescriptionError,
    ServiceDescription,
};
use crate::http::{HttpRequest, HttpResponse};
use crate::netfab::{
    http_base, request_target, socket_addr_of, Context, InboundId, Node, OutboundId, Transport,
    TransportError,
};
use crate::sd_agent::{ControlFault, ControlReply, ControlRequest};
use crate::ssdp::{
    matches_search_target, parse_message, serialize_message, MessageKind, SsdpMessage, SSDP_GROUP,
};

pub const DEFAULT_MAX_REDIRECTS: usize = 3;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CpError {
    #[error("service has no action {0}")]
    UnknownAction(String),
    #[error("argument error: {0}")]
    ArgumentType(String),
    #[error("more than {0} redirects")]
    RedirectLoop(usize),
    #[error("unreachable: {0}")]
    Unreachable(String),
    #[error("timed out")]
    Timeout,
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("action failed: {0:?}")]
    Fault(ControlFault),
    #[error(transparent)]
    Description(#[from] DescriptionError),
    #[error("protocol error: {0}")]
    Protocol(String),
}

impl From<TransportError> for CpError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Unreachable(m) | TransportError::Io(m) => CpError::Unreachable(m),
            TransportError::Timeout => CpError::Timeout,
            TransportError::Protocol(m) => CpError::Protocol(m),
        }
    }
}

/// One discovery result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Discovered {
    pub location: Url,
    pub usn: String,
    pub search_target: String,
    pub from: SocketAddr,
}

/// M-SEARCH payload for `st`.
pub fn search_payload(st: &str) -> Vec<u8> {
    serialize_message(&SsdpMessage::msearch(SSDP_GROUP, st)).expect("valid M-SEARCH")
}

/// Keeps search responses whose target matches `st`, first arrival per USN.
pub fn collect_responses(st: &str, datagrams: &[(SocketAddr, Vec<u8>)]) -> Vec<Discovered> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (from, payload) in datagrams {
        let Ok(msg) = parse_message(payload) else { continue };
        if msg.kind != MessageKind::SearchResponse
            || !matches_search_target(&msg.search_target, st)
        {
            continue;
        }
        let (Some(location), Some(usn)) = (msg.location.as_deref(), msg.usn.clone()) else {
            continue;
        };
        let Ok(location) = Url::parse(location) else { continue };
        if seen.insert(usn.clone()) {
            out.push(Discovered {
                location,
                usn,
                search_target: msg.search_target,
                from: *from,
            });
        }
    }
    out
}

/// An HTTP exchange that follows up to `max_redirects` redirects.
#[derive(Debug, Clone)]
pub struct Invocation {
    method: String,
    headers: Vec<(String, String)>,
    body: Vec<u8>,
    url: Url,
    redirects: usize,
    max_redirects: usize,
}

impl Invocation {
    pub fn new(method: &str, url: Url, headers: Vec<(String, String)>, body: Vec<u8>, max_redirects: usize) -> Self {
        Invocation {
            method: method.to_string(),
            headers,
            body,
            url,
            redirects: 0,
            max_redirects,
        }
    }

    pub fn url(&self) -> &Url {
        &self.url
    }

    pub fn redirects(&self) -> usize {
        self.redirects
    }

    /// The request to send to the current URL.
    pub fn request(&self) -> Result<(SocketAddr, HttpRequest), CpError> {
        let addr = socket_addr_of(&self.url)?;
        let mut req = HttpRequest::new(self.method.clone(), request_target(&self.url))
            .with_header("HOST", addr.to_string());
        for (n, v) in &self.headers {
            req = req.with_header(n.clone(), v.clone());
        }
        if !self.body.is_empty() {
            req = req.with_json(self.body.clone());
        }
        Ok((addr, req))
    }

    /// Feeds a response. `Ok(None)` means a redirect was taken and
    /// [`Invocation::request`] now targets the new location.
    pub fn on_response(&mut self, resp: HttpResponse) -> Result<Option<HttpResponse>, CpError> {
        if !matches!(resp.status, 301 | 302 | 303 | 307 | 308) {
            return Ok(Some(resp));
        }
        let location = resp
            .header("LOCATION")
            .ok_or_else(|| CpError::Protocol("redirect without LOCATION".into()))?;
        let next = self
            .url
            .join(location)
            .map_err(|e| CpError::Protocol(format!("bad redirect target: {e}")))?;
        self.redirects += 1;
        if self.redirects > self.max_redirects {
            return Err(CpError::RedirectLoop(self.max_redirects));
        }
        self.url = next;
        Ok(None)
    }
}

/// Checks `args` against the action's input arguments.
pub fn check_arguments(doc: &ServiceDescription, action: &str, args: &Map<String, Value>) -> Result<(), CpError> {
    let sig = doc
        .action(action)
        .ok_or_else(|| CpError::UnknownAction(action.to_string()))?;
    for input in sig.inputs() {
        match args.get(&input.name) {
            Some(v) if input.type_tag.accepts(v) => {}
            Some(_) => return Err(CpError::ArgumentType(format!("{} must be {:?}", input.name, input.type_tag))),
            None => return Err(CpError::ArgumentType(format!("missing {}", input.name))),
        }
    }
    if let Some(extra) = args.keys().find(|k| !sig.inputs().any(|a| &a.name == *k)) {
        return Err(CpError::ArgumentType(format!("unexpected argument {extra}")));
    }
    Ok(())
}

/// The control request that invokes `action` as described by `doc`, whose
/// relative URLs resolve against `base`.
pub fn control_invocation(
    base: &Url,
    doc: &ServiceDescription,
    action: &str,
    args: Map<String, Value>,
    max_redirects: usize,
) -> Result<Invocation, CpError> {
    check_arguments(doc, action, &args)?;
    let url = base
        .join(&doc.control_url)
        .map_err(|e| CpError::Protocol(format!("bad control URL: {e}")))?;
    let body = serde_json::to_vec(&ControlRequest {
        action: action.to_string(),
        args,
    })
    .expect("serializable");
    Ok(Invocation::new("POST", url, Vec::new(), body, max_redirects))
}

pub fn subscribe_invocation(base: &Url, doc: &ServiceDescription, callback: &Url, max_redirects: usize) -> Result<Invocation, CpError> {
    let url = base
        .join(&doc.event_url)
        .map_err(|e| CpError::Protocol(format!("bad event URL: {e}")))?;
    let headers = vec![
        ("CALLBACK".to_string(), format!("<{callback}>")),
        ("NT".to_string(), "upnp:event".to_string()),
    ];
    Ok(Invocation::new("SUBSCRIBE", url, headers, Vec::new(), max_redirects))
}

/// Output arguments of a control response.
pub fn control_outputs(resp: &HttpResponse) -> Result<Map<String, Value>, CpError> {
    match resp.status {
        200 => serde_json::from_slice::<ControlReply>(&resp.body)
            .map(|r| r.out)
            .map_err(|e| CpError::Protocol(e.to_string())),
        500 => match serde_json::from_slice::<ControlFault>(&resp.body) {
            Ok(fault) => Err(CpError::Fault(fault)),
            Err(_) => Err(CpError::HttpStatus(500)),
        },
        s => Err(CpError::HttpStatus(s)),
    }
}

/// Subscription id of a SUBSCRIBE response.
pub fn subscription_id(resp: &HttpResponse) -> Result<String, CpError> {
    if resp.status != 200 {
        return Err(CpError::HttpStatus(resp.status));
    }
    resp.header("SID")
        .map(str::to_string)
        .ok_or_else(|| CpError::Protocol("SUBSCRIBE response without SID".into()))
}

/// Blocking control point over any [`Transport`].
pub struct ControlPoint<'t> {
    transport: &'t mut dyn Transport,
    pub max_redirects: usize,
}

impl<'t> ControlPoint<'t> {
    pub fn new(transport: &'t mut dyn Transport) -> Self {
        ControlPoint {
            transport,
            max_redirects: DEFAULT_MAX_REDIRECTS,
        }
    }

    pub fn transport(&mut self) -> &mut dyn Transport {
        self.transport
    }

    /// Multicasts an M-SEARCH and collects answers for `wait`.
    pub fn discover(&mut self, st: &str, wait: Duration) -> Result<Vec<Discovered>, CpError> {
        let datagrams = self.transport.search(&search_payload(st), wait)?;
        Ok(collect_responses(st, &datagrams))
    }

    pub fn describe(&mut self, location: &Url) -> Result<ServiceDescription, CpError> {
        Ok(fetch_description(location, self.transport)?)
    }

    pub fn describe_bytes(&mut self, location: &Url) -> Result<Vec<u8>, CpError> {
        Ok(fetch_description_bytes(location, self.transport)?)
    }

    fn run(&mut self, mut inv: Invocation) -> Result<HttpResponse, CpError> {
        loop {
            let (addr, req) = inv.request()?;
            let resp = self.transport.request(addr, req)?;
            if let Some(resp) = inv.on_response(resp)? {
                return Ok(resp);
            }
        }
    }

    pub fn invoke_action(
        &mut self,
        base: &Url,
        doc: &ServiceDescription,
        action: &str,
        args: Map<String, Value>,
    ) -> Result<Map<String, Value>, CpError> {
        let inv = control_invocation(base, doc, action, args, self.max_redirects)?;
        control_outputs(&self.run(inv)?)
    }

    pub fn subscribe(&mut self, base: &Url, doc: &ServiceDescription, callback: &Url) -> Result<String, CpError> {
        let inv = subscribe_invocation(base, doc, callback, self.max_redirects)?;
        subscription_id(&self.run(inv)?)
    }

    /// Runs `discover` every `interval` until `f` returns false or
    /// `rounds` searches have been made.
    pub fn discovery_loop(
        &mut self,
        st: &str,
        interval: Duration,
        rounds: Option<usize>,
        mut f: impl FnMut(usize, &[Discovered]) -> bool,
    ) -> Result<usize, CpError> {
        let wait = interval.min(Duration::from_secs(1));
        let mut round = 0;
        while rounds.is_none_or(|r| round < r) {
            let found = self.discover(st, wait)?;
            round += 1;
            if !f(round, &found) {
                break;
            }
            if rounds.is_none_or(|r| round < r) {
                self.transport.pause(interval.saturating_sub(wait));
            }
        }
        Ok(round)
    }
}

/// Time between two searches of a [`DiscoveryLoop`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interval {
    Fixed(Duration),
    /// Uniform over whole milliseconds in `[min, max]`.
    Uniform(Duration, Duration),
}

impl Interval {
    fn draw(self, rng: &mut dyn rand::RngCore) -> Duration {
        match self {
            Interval::Fixed(d) => d,
            Interval::Uniform(lo, hi) => {
                let ms = rng.gen_range(lo.as_millis() as u64..=hi.as_millis() as u64);
                Duration::from_millis(ms)
            }
        }
    }

    fn first(self, rng: &mut dyn rand::RngCore) -> Duration {
        let span = match self {
            Interval::Fixed(d) => d,
            Interval::Uniform(_, hi) => hi,
        };
        Duration::from_micros(rng.gen_range(0..span.as_micros().max(1) as u64))
    }
}

const TAG_SEARCH: u64 = 1;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoopStats {
    pub searches: u64,
    pub responses: u64,
    pub descriptions: u64,
}

/// A control point that searches periodically, starting at a random phase.
pub struct DiscoveryLoop {
    st: String,
    interval: Interval,
    fetch_descriptions: bool,
    stopped: bool,
    stats: LoopStats,
}

impl DiscoveryLoop {
    pub fn new(st: &str, interval: Interval) -> Self {
        DiscoveryLoop {
            st: st.to_string(),
            interval,
            fetch_descriptions: false,
            stopped: false,
            stats: LoopStats::default(),
        }
    }

    /// Also retrieve the description behind every response.
    pub fn fetching_descriptions(mut self) -> Self {
        self.fetch_descriptions = true;
        self
    }

    pub fn stats(&self) -> LoopStats {
        self.stats
    }
}

impl Node for DiscoveryLoop {
    fn start(&mut self, cx: &mut dyn Context) {
        let first = self.interval.first(cx.rng());
        cx.set_timer(first, TAG_SEARCH);
    }

    fn on_datagram(&mut self, cx: &mut dyn Context, from: SocketAddr, payload: &[u8]) {
        let found = collect_responses(&self.st, &[(from, payload.to_vec())]);
        self.stats.responses += found.len() as u64;
        if self.fetch_descriptions && !self.stopped {
            for d in found {
                if let Ok(addr) = socket_addr_of(&d.location) {
                    cx.request(addr, HttpRequest::new("GET", request_target(&d.location)));
                    self.stats.descriptions += 1;
                }
            }
        }
    }

    fn on_request(&mut self, cx: &mut dyn Context, id: InboundId, _from: SocketAddr, _req: HttpRequest) {
        cx.respond(id, HttpResponse::not_found());
    }

    fn on_timer(&mut self, cx: &mut dyn Context, tag: u64) {
        if tag != TAG_SEARCH || self.stopped {
            return;
        }
        cx.send_multicast(search_payload(&self.st));
        self.stats.searches += 1;
        let next = self.interval.draw(cx.rng());
        cx.set_timer(next, TAG_SEARCH);
    }

    fn stop(&mut self, _cx: &mut dyn Context) {
        self.stopped = true;
    }
}

const TAG_RESEARCH: u64 = 10;
const TAG_ACCESS: u64 = 11;

#[derive(Debug)]
enum Phase {
    Discovering,
    Describing,
    Ready { base: Url, doc: Box<ServiceDescription> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Purpose {
    Describe,
    Subscribe,
    Control,
}

/// Result of one service access made by a [`TargetedCp`].
#[derive(Debug, Clone, PartialEq)]
pub struct AccessRecord {
    pub started: Duration,
    pub finished: Duration,
    pub redirects: usize,
    pub outcome: Result<Map<String, Value>, CpError>,
}

/// A control point that finds one service, subscribes to it, then invokes
/// an action on it every `control_interval`.
pub struct TargetedCp {
    st: String,
    action: String,
    args: Map<String, Value>,
    control_interval: Duration,
    subscribe: bool,
    max_redirects: usize,
    phase: Phase,
    inflight: std::collections::HashMap<OutboundId, (Purpose, Invocation, Duration)>,
    stopped: bool,
    sid: Option<String>,
    accesses: Vec<AccessRecord>,
    notifications: Vec<HttpRequest>,
}

impl TargetedCp {
    pub fn new(st: &str, action: &str, args: Map<String, Value>, control_interval: Duration) -> Self {
        TargetedCp {
            st: st.to_string(),
            action: action.to_string(),
            args,
            control_interval,
            subscribe: true,
            max_redirects: DEFAULT_MAX_REDIRECTS,
            phase: Phase::Discovering,
            inflight: std::collections::HashMap::new(),
            stopped: false,
            sid: None,
            accesses: Vec::new(),
            notifications: Vec::new(),
        }
    }

    pub fn without_subscription(mut self) -> Self {
        self.subscribe = false;
        self
    }

    pub fn accesses(&self) -> &[AccessRecord] {
        &self.accesses
    }

    pub fn subscription(&self) -> Option<&str> {
        self.sid.as_deref()
    }

    pub fn notifications(&self) -> &[HttpRequest] {
        &self.notifications
    }

    pub fn service(&self) -> Option<(&Url, &ServiceDescription)> {
        match &self.phase {
            Phase::Ready { base, doc } => Some((base, doc)),
            _ => None,
        }
    }

    fn send(&mut self, cx: &mut dyn Context, purpose: Purpose, inv: Invocation, started: Duration) {
        match inv.request() {
            Ok((addr, req)) => {
                let id = cx.request(addr, req);
                self.inflight.insert(id, (purpose, inv, started));
            }
            Err(e) => self.finish(cx, purpose, &inv, started, Err(e)),
        }
    }

    fn finish(&mut self, cx: &mut dyn Context, purpose: Purpose, inv: &Invocation, started: Duration, result: Result<HttpResponse, CpError>) {
        match purpose {
            Purpose::Describe => {
                let doc = result.and_then(|r| match r.status {
                    200 => decode_description(&r.body).map_err(CpError::from),
                    s => Err(CpError::HttpStatus(s)),
                });
                match doc {
                    Ok(doc) => {
                        let base = inv.url().clone();
                        self.phase = Phase::Ready { base: base.clone(), doc: Box::new(doc.clone()) };
                        if self.subscribe {
                            let callback = http_base(cx.http_addr()).join("notify").expect("static path");
                            if let Ok(sub) = subscribe_invocation(&base, &doc, &callback, self.max_redirects) {
                                let now = cx.now();
                                self.send(cx, Purpose::Subscribe, sub, now);
                            }
                        }
                        cx.set_timer(self.control_interval, TAG_ACCESS);
                    }
                    Err(e) => {
                        log::debug!("describe failed: {e}");
                        self.phase = Phase::Discovering;
                        cx.set_timer(Duration::from_secs(1), TAG_RESEARCH);
                    }
                }
            }
            Purpose::Subscribe => {
                if let Ok(sid) = result.and_then(|r| subscription_id(&r)) {
                    self.sid = Some(sid);
                }
            }
            Purpose::Control => {
                let outcome = result.and_then(|r| control_outputs(&r));
                self.accesses.push(AccessRecord {
                    started,
                    finished: cx.now(),
                    redirects: inv.redirects(),
                    outcome,
                });
            }
        }
    }

    fn search(&mut self, cx: &mut dyn Context) {
        cx.send_multicast(search_payload(&self.st));
        cx.set_timer(Duration::from_secs(3), TAG_RESEARCH);
    }
}

impl Node for TargetedCp {
    fn start(&mut self, cx: &mut dyn Context) {
        self.search(cx);
    }

    fn on_datagram(&mut self, cx: &mut dyn Context, from: SocketAddr, payload: &[u8]) {
        if !matches!(self.phase, Phase::Discovering) {
            return;
        }
        let Some(found) = collect_responses(&self.st, &[(from, payload.to_vec())]).pop() else {
            return;
        };
        self.phase = Phase::Describing;
        let inv = Invocation::new("GET", found.location, Vec::new(), Vec::new(), self.max_redirects);
        let now = cx.now();
        self.send(cx, Purpose::Describe, inv, now);
    }

    fn on_request(&mut self, cx: &mut dyn Context, id: InboundId, _from: SocketAddr, req: HttpRequest) {
        if req.method == "NOTIFY" {
            self.notifications.push(req);
            cx.respond(id, HttpResponse::new(200));
        } else {
            cx.respond(id, HttpResponse::not_found());
        }
    }

    fn on_response(&mut self, cx: &mut dyn Context, id: OutboundId, result: Result<HttpResponse, TransportError>) {
        let Some((purpose, mut inv, started)) = self.inflight.remove(&id) else { return };
        let step = result.map_err(CpError::from).and_then(|r| inv.on_response(r));
        match step {
            Ok(None) => self.send(cx, purpose, inv, started),
            Ok(Some(resp)) => self.finish(cx, purpose, &inv, started, Ok(resp)),
            Err(e) => self.finish(cx, purpose, &inv, started, Err(e)),
        }
    }

    fn on_timer(&mut self, cx: &mut dyn Context, tag: u64) {
        if self.stopped {
            return;
        }
        match tag {
            TAG_RESEARCH if matches!(self.phase, Phase::Discovering) => self.search(cx),
            TAG_ACCESS => {
                if let Phase::Ready { base, doc } = &self.phase {
                    match control_invocation(base, doc, &self.action, self.args.clone(), self.max_redirects) {
                        Ok(inv) => {
                            let now = cx.now();
                            self.send(cx, Purpose::Control, inv, now)
                        }
                        Err(e) => log::warn!("cannot invoke {}: {e}", self.action),
                    }
                }
                cx.set_timer(self.control_interval, TAG_ACCESS);
            }
            _ => {}
        }
    }

    fn stop(&mut self, _cx: &mut dyn Context) {
        self.stopped = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptions::{ActionSignature, Argument, Direction, TypeTag};
    use crate::netfab::sim::{SimNet, SimNetConfig};
    use crate::netfab::LinkClass;
    use crate::sd_agent::{EnrollMode, SdConfig, SdNode, SdOptions, DEMO_TYPE};
    use rand::SeedableRng;
    use serde_json::json;

    fn url(s: &str) -> Url {
        Url::parse(s).unwrap()
    }

    fn redirect(to: &str) -> HttpResponse {
        HttpResponse::redirect(to)
    }

    #[test]
    fn follows_redirects_up_to_the_limit() {
        let mut inv = Invocation::new("POST", url("http://10.0.0.1/a"), vec![], b"{}".to_vec(), 2);
        assert_eq!(inv.on_response(redirect("http://10.0.0.2/b")).unwrap(), None);
        assert_eq!(inv.url().as_str(), "http://10.0.0.2/b");
        assert_eq!(inv.on_response(redirect("/c")).unwrap(), None);
        assert_eq!(inv.url().as_str(), "http://10.0.0.2/c");
        let (addr, req) = inv.request().unwrap();
        assert_eq!(addr.to_string(), "10.0.0.2:80");
        assert_eq!((req.method.as_str(), req.target.as_str()), ("POST", "/c"));
        assert_eq!(inv.on_response(redirect("/a")), Err(CpError::RedirectLoop(2)));
    }

    #[test]
    fn non_redirects_are_final() {
        let mut inv = Invocation::new("GET", url("http://10.0.0.1/a"), vec![], vec![], 3);
        let got = inv.on_response(HttpResponse::not_found()).unwrap().unwrap();
        assert_eq!(got.status, 404);
        assert_eq!(inv.redirects(), 0);
        let mut inv = Invocation::new("GET", url("http://10.0.0.1/a"), vec![], vec![], 3);
        assert!(matches!(inv.on_response(HttpResponse::new(301)), Err(CpError::Protocol(_))));
    }

    #[test]
    fn arguments_are_checked_against_the_signature() {
        let doc = ServiceDescription {
            service_name: "s".into(),
            service_type: "t".into(),
            control_url: "control".into(),
            event_url: "events".into(),
            actions: vec![ActionSignature {
                name: "Set".into(),
                arguments: vec![Argument {
                    name: "v".into(),
                    direction: Direction::In,
                    type_tag: TypeTag::Int,
                }],
            }],
            state_variables: vec![],
        };
        let args = |v: Value| v.as_object().unwrap().clone();
        check_arguments(&doc, "Set", &args(json!({"v": 1}))).unwrap();
        assert!(matches!(check_arguments(&doc, "Get", &Map::new()), Err(CpError::UnknownAction(_))));
        for bad in [json!({}), json!({"v": "1"}), json!({"v": 1, "w": 2})] {
            assert!(matches!(check_arguments(&doc, "Set", &args(bad)), Err(CpError::ArgumentType(_))));
        }
    }

    #[test]
    fn responses_dedupe_by_usn() {
        let from: SocketAddr = "10.0.0.9:1900".parse().unwrap();
        let a = serialize_message(&SsdpMessage::search_response("t:x", "http://10.0.0.9/a", "uuid:d::a", 1800)).unwrap();
        let b = serialize_message(&SsdpMessage::search_response("t:x", "http://10.0.0.8/a", "uuid:d::a", 1800)).unwrap();
        let c = serialize_message(&SsdpMessage::search_response("t:y", "http://10.0.0.9/c", "uuid:d::c", 1800)).unwrap();
        let got = collect_responses("t:x", &[(from, a), (from, b), (from, c), (from, b"junk".to_vec())]);
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].location.as_str(), "http://10.0.0.9/a");
    }

    #[test]
    fn intervals_stay_in_range() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let iv = Interval::Uniform(Duration::from_millis(1000), Duration::from_millis(3000));
        let draws: Vec<u128> = (0..2000).map(|_| iv.draw(&mut rng).as_millis()).collect();
        assert!(draws.iter().all(|d| (1000..=3000).contains(d)));
        assert!(*draws.iter().min().unwrap() < 1050 && *draws.iter().max().unwrap() > 2950);
        let fixed = Interval::Fixed(Duration::from_secs(2));
        assert_eq!(fixed.draw(&mut rng), Duration::from_secs(2));
        assert!((0..100).all(|_| fixed.first(&mut rng) < Duration::from_secs(2)));
    }

    #[test]
    fn targeted_cp_accesses_periodically() {
        let mut net = SimNet::new(SimNetConfig::default()).unwrap();
        let sd = SdNode::new(SdConfig::demo("sd", 3, 1), SdOptions { mode: EnrollMode::Baseline, ..SdOptions::default() }).unwrap();
        net.add_node("sd", LinkClass::LLN, true, Box::new(sd), Duration::ZERO);
        let mut args = Map::new();
        args.insert("in".into(), json!("x"));
        let cp = TargetedCp::new(DEMO_TYPE, "Echo", args.clone(), Duration::from_secs(10));
        let dev = net.add_node("cp", LinkClass::WIFI, false, Box::new(cp), Duration::from_secs(1));
        net.run_until(Duration::from_secs(65));
        let cp = net.node::<TargetedCp>(dev).unwrap();
        assert!(cp.subscription().is_some());
        let accesses = cp.accesses();
        assert!((5..=7).contains(&accesses.len()), "{}", accesses.len());
        let mut want = Map::new();
        want.insert("out".into(), json!("x"));
        assert!(accesses.iter().all(|a| a.outcome.as_ref() == Ok(&want) && a.finished > a.started));
    }
}
