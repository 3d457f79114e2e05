//! The service device.
//!
//! Hosts services built from a small set of action primitives, serves their
//! descriptions, control and eventing, and either advertises and answers
//! discovery itself or delegates both to a VSD after enrolling.
//!
//! Delegation is tracked per service so that a partially successful
//! Service-add leaves the rejected services self-advertised.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;
use url::Url;

use crate::descriptions::{
    decode_description, encode_description, ActionSignature, Argument, Direction,
    ServiceDescription, StateVariable, TypeTag, VsdAgentDescription, SERVICE_ADD, SERVICE_REMOVE,
    SERVICE_UPDATE,
};
use crate::http::{HttpRequest, HttpResponse};
use crate::netfab::{
    http_base, request_target, socket_addr_of, Context, InboundId, Node, OutboundId,
    TransportError,
};
use crate::service_registry::ServiceInfo;
use crate::ssdp::{
    matches_search_target, parse_message, serialize_message, usn_for, MessageKind, SsdpMessage,
    SSDP_GROUP, VSD_AGENT_ST,
};
use crate::vsd_daemon::{AgentRequest, AgentResponse, ItemStatus};

const TAG_ADVERTISE: u64 = 1;
const TAG_VSD_RETRY: u64 = 2;
/// Low byte tags the timer, the rest carries the search attempt.
const TAG_VSD_TIMEOUT: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Primitive {
    /// `in` → `out`, unchanged.
    Echo,
    /// `value` → `previous`; stores `value` in the bound variable.
    Set,
    /// → `value` of the bound variable.
    Get,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    pub primitive: Primitive,
    /// State variable used by `set` and `get`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
    /// Argument type of `echo`; string when omitted.
    #[serde(rename = "type", default, skip_serializing_if = "Option::is_none")]
    pub type_tag: Option<TypeTag>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariableSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub type_tag: TypeTag,
    #[serde(default)]
    pub evented: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceSpec {
    pub name: String,
    #[serde(rename = "type")]
    pub service_type: String,
    #[serde(default)]
    pub actions: Vec<ActionSpec>,
    #[serde(default)]
    pub variables: Vec<VariableSpec>,
}

/// Service device configuration file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SdConfig {
    pub id: String,
    pub services: Vec<ServiceSpec>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SdConfigError {
    #[error("cannot parse service config: {0}")]
    Parse(String),
    #[error("invalid service config: {0}")]
    Invalid(String),
}

impl SdConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, SdConfigError> {
        let cfg: SdConfig = toml::from_str(text).map_err(|e| SdConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), SdConfigError> {
        let bad = |m: String| Err(SdConfigError::Invalid(m));
        if self.id.is_empty() || self.id.contains('/') {
            return bad(format!("bad device id {:?}", self.id));
        }
        if self.services.is_empty() {
            return bad("no services".into());
        }
        let mut names = std::collections::HashSet::new();
        for s in &self.services {
            if s.name.is_empty() || s.service_type.is_empty() {
                return bad("service name and type must be non-empty".into());
            }
            if !names.insert(&s.name) {
                return bad(format!("duplicate service {}", s.name));
            }
            for a in &s.actions {
                match (a.primitive, &a.variable) {
                    (Primitive::Echo, _) => {}
                    (_, None) => return bad(format!("{}.{} needs a variable", s.name, a.name)),
                    (_, Some(v)) if !s.variables.iter().any(|x| &x.name == v) => {
                        return bad(format!("{}.{} uses unknown variable {v}", s.name, a.name))
                    }
                    _ => {}
                }
            }
            for v in &s.variables {
                if let Some(init) = &v.initial {
                    if !v.type_tag.accepts(init) {
                        return bad(format!("{}.{} initial value has wrong type", s.name, v.name));
                    }
                }
            }
            build_description(s).validate().map_err(|e| SdConfigError::Invalid(e.to_string()))?;
        }
        Ok(())
    }

    /// `count` services with two actions each: `Echo` and `SetLevel` on an
    /// evented `level` variable. The first `shared_type` services share one
    /// service type.
    pub fn demo(id: &str, count: usize, shared_type: usize) -> Self {
        let services = (0..count)
            .map(|i| ServiceSpec {
                name: format!("service-{i}"),
                service_type: if i < shared_type {
                    DEMO_TYPE.to_string()
                } else {
                    format!("urn:demo:service:Sensor{i}:1")
                },
                actions: vec![
                    ActionSpec {
                        name: "Echo".into(),
                        primitive: Primitive::Echo,
                        variable: None,
                        type_tag: None,
                    },
                    ActionSpec {
                        name: "SetLevel".into(),
                        primitive: Primitive::Set,
                        variable: Some("level".into()),
                        type_tag: None,
                    },
                ],
                variables: vec![VariableSpec {
                    name: "level".into(),
                    type_tag: TypeTag::Int,
                    evented: true,
                    initial: None,
                }],
            })
            .collect();
        SdConfig {
            id: id.to_string(),
            services,
        }
    }
}

/// Service type shared by the services of [`SdConfig::demo`].
pub const DEMO_TYPE: &str = "urn:demo:service:Sensor:1";

fn arg(name: &str, direction: Direction, type_tag: TypeTag) -> Argument {
    Argument {
        name: name.into(),
        direction,
        type_tag,
    }
}

fn signature(service: &ServiceSpec, action: &ActionSpec) -> ActionSignature {
    let var_type = || {
        action
            .variable
            .as_ref()
            .and_then(|v| service.variables.iter().find(|x| &x.name == v))
            .map(|v| v.type_tag)
            .unwrap_or(TypeTag::String)
    };
    let arguments = match action.primitive {
        Primitive::Echo => {
            let t = action.type_tag.unwrap_or(TypeTag::String);
            vec![arg("in", Direction::In, t), arg("out", Direction::Out, t)]
        }
        Primitive::Set => vec![
            arg("value", Direction::In, var_type()),
            arg("previous", Direction::Out, var_type()),
        ],
        Primitive::Get => vec![arg("value", Direction::Out, var_type())],
    };
    ActionSignature {
        name: action.name.clone(),
        arguments,
    }
}

/// The description a service device publishes for `service`. Control and
/// event URLs are relative to the description location.
pub fn build_description(service: &ServiceSpec) -> ServiceDescription {
    ServiceDescription {
        service_name: service.name.clone(),
        service_type: service.service_type.clone(),
        control_url: "control".into(),
        event_url: "events".into(),
        actions: service.actions.iter().map(|a| signature(service, a)).collect(),
        state_variables: service
            .variables
            .iter()
            .map(|v| StateVariable {
                name: v.name.clone(),
                type_tag: v.type_tag,
                evented: v.evented,
            })
            .collect(),
    }
}

/// Body of a control request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRequest {
    pub action: String,
    #[serde(default)]
    pub args: Map<String, Value>,
}

/// Body of a successful control response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlReply {
    pub action: String,
    pub out: Map<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Error)]
pub enum ControlError {
    #[error("unknown action")]
    UnknownAction,
    #[error("argument type error")]
    ArgumentTypeError,
    #[error("handler failure")]
    HandlerFailure,
}

/// Body of a control error response (status 500).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFault {
    pub error: ControlError,
    pub detail: String,
}

/// Body of an event notification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventNotification {
    pub sid: String,
    pub seq: u64,
    pub changes: BTreeMap<String, Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EnrollMode {
    /// Look for a VSD and delegate when one is found.
    Auto,
    /// Never delegate.
    Baseline,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdOptions {
    pub mode: EnrollMode,
    pub advertisement_interval: Duration,
    pub vsd_search_timeout: Duration,
    pub vsd_retry_interval: Duration,
    /// Leave the multicast group once every service is delegated, since a
    /// fully delegated device has no use for discovery traffic.
    pub leave_group_when_delegated: bool,
}

impl Default for SdOptions {
    fn default() -> Self {
        SdOptions {
            mode: EnrollMode::Auto,
            advertisement_interval: Duration::from_secs(120),
            vsd_search_timeout: Duration::from_secs(3),
            vsd_retry_interval: Duration::from_secs(60),
            leave_group_when_delegated: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delegation {
    Local,
    /// Service-add in flight. The device stays silent on discovery for
    /// this service so that the VSD and the device never both reply.
    Pending,
    Delegated,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SdMode {
    Baseline,
    Delegated(Url),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Enrollment {
    Idle,
    Searching(u64),
    Fetching,
    Adding,
    Enrolled(Url),
}

#[derive(Debug)]
enum Call {
    AgentDescription(Url),
    Agent { action: String, services: Vec<usize> },
    Notify,
}

#[derive(Debug, Clone)]
struct Subscription {
    sid: String,
    callback: Url,
    seq: u64,
}

struct Hosted {
    spec: ServiceSpec,
    doc: Vec<u8>,
    state: BTreeMap<String, Value>,
    subs: Vec<Subscription>,
    delegation: Delegation,
}

impl Hosted {
    fn new(spec: ServiceSpec) -> Self {
        let doc = encode_description(&build_description(&spec));
        let state = spec
            .variables
            .iter()
            .map(|v| {
                let value = v.initial.clone().unwrap_or_else(|| v.type_tag.default_value());
                (v.name.clone(), value)
            })
            .collect();
        Hosted {
            spec,
            doc,
            state,
            subs: Vec::new(),
            delegation: Delegation::Local,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SdStats {
    pub advertisements: u64,
    pub discovery_replies: u64,
    pub notifications: u64,
    pub control_requests: u64,
    pub subscriptions: u64,
}

pub struct SdNode {
    cfg: SdConfig,
    opts: SdOptions,
    services: Vec<Hosted>,
    base: Option<Url>,
    enrollment: Enrollment,
    pending_control: Option<Url>,
    calls: HashMap<OutboundId, Call>,
    attempt: u64,
    next_sid: u64,
    departed: bool,
    stopped: bool,
    in_group: bool,
    stats: SdStats,
}

/// Path of a hosted service resource: `/services/<name>/<leaf>`.
pub fn service_path(name: &str, leaf: &str) -> String {
    let mut url = Url::parse("http://localhost/").expect("static URL");
    url.path_segments_mut()
        .expect("http URL")
        .extend(["services", name, leaf]);
    url.path().to_string()
}

impl SdNode {
    pub fn new(cfg: SdConfig, opts: SdOptions) -> Result<Self, SdConfigError> {
        cfg.validate()?;
        if opts.advertisement_interval.is_zero() {
            return Err(SdConfigError::Invalid("advertisement interval must be positive".into()));
        }
        let services = cfg.services.iter().cloned().map(Hosted::new).collect();
        Ok(SdNode {
            cfg,
            opts,
            services,
            base: None,
            enrollment: Enrollment::Idle,
            pending_control: None,
            calls: HashMap::new(),
            attempt: 0,
            next_sid: 0,
            departed: false,
            stopped: false,
            in_group: true,
            stats: SdStats::default(),
        })
    }

    pub fn id(&self) -> &str {
        &self.cfg.id
    }

    pub fn stats(&self) -> SdStats {
        self.stats
    }

    pub fn delegation(&self, service_name: &str) -> Option<Delegation> {
        self.services
            .iter()
            .find(|s| s.spec.name == service_name)
            .map(|s| s.delegation)
    }

    /// Delegated once at least one service has been accepted by a VSD.
    pub fn mode(&self) -> SdMode {
        match &self.enrollment {
            Enrollment::Enrolled(control) => SdMode::Delegated(control.clone()),
            _ => SdMode::Baseline,
        }
    }

    pub fn description_bytes(&self, service_name: &str) -> Option<&[u8]> {
        self.services
            .iter()
            .find(|s| s.spec.name == service_name)
            .map(|s| s.doc.as_slice())
    }

    pub fn state_value(&self, service_name: &str, variable: &str) -> Option<&Value> {
        self.services
            .iter()
            .find(|s| s.spec.name == service_name)?
            .state
            .get(variable)
    }

    pub fn subscriber_count(&self, service_name: &str) -> usize {
        self.services
            .iter()
            .find(|s| s.spec.name == service_name)
            .map_or(0, |s| s.subs.len())
    }

    /// Enrollment tuple for every hosted service, with absolute URLs on
    /// this device.
    pub fn service_infos(&self) -> Vec<ServiceInfo> {
        (0..self.services.len()).map(|i| self.info(i)).collect()
    }

    fn base(&self) -> &Url {
        self.base.as_ref().expect("started")
    }

    fn info(&self, index: usize) -> ServiceInfo {
        let name = &self.services[index].spec.name;
        let url = |leaf| self.base().join(&service_path(name, leaf)).expect("valid path");
        ServiceInfo {
            service_name: name.clone(),
            service_type: self.services[index].spec.service_type.clone(),
            description_location_url: url("description").to_string(),
            control_url: url("control").to_string(),
            event_url: url("events").to_string(),
        }
    }

    /// Multicasts one advertisement per service not delegated to a VSD.
    pub fn advertise_tick(&mut self, cx: &mut dyn Context) -> usize {
        if self.departed {
            return 0;
        }
        let max_age = (self.opts.advertisement_interval.as_secs() * 3).max(1) as u32;
        let mut sent = 0;
        for i in 0..self.services.len() {
            if self.services[i].delegation == Delegation::Delegated {
                continue;
            }
            let info = self.info(i);
            let msg = SsdpMessage::notify(
                SSDP_GROUP,
                info.service_type,
                info.description_location_url,
                usn_for(&self.cfg.id, &info.service_name),
                max_age,
            );
            if let Ok(bytes) = serialize_message(&msg) {
                cx.send_multicast(bytes);
                sent += 1;
            }
        }
        self.stats.advertisements += sent as u64;
        sent
    }

    /// Replies to an M-SEARCH for each matching service that is neither
    /// delegated nor being delegated.
    pub fn handle_discovery(&mut self, cx: &mut dyn Context, from: SocketAddr, msg: &SsdpMessage) -> usize {
        if self.departed || msg.search_target == VSD_AGENT_ST {
            return 0;
        }
        let mut sent = 0;
        for i in 0..self.services.len() {
            let s = &self.services[i];
            if s.delegation != Delegation::Local
                || !matches_search_target(&s.spec.service_type, &msg.search_target)
            {
                continue;
            }
            let info = self.info(i);
            let reply = SsdpMessage::search_response(
                info.service_type,
                info.description_location_url,
                usn_for(&self.cfg.id, &info.service_name),
                (self.opts.advertisement_interval.as_secs() * 3).max(1) as u32,
            );
            if let Ok(bytes) = serialize_message(&reply) {
                cx.send_datagram(from, bytes);
                sent += 1;
            }
        }
        self.stats.discovery_replies += sent as u64;
        sent
    }

    /// Multicasts a VSD discovery and waits for the first answer.
    pub fn discover_vsd(&mut self, cx: &mut dyn Context) {
        self.attempt += 1;
        self.enrollment = Enrollment::Searching(self.attempt);
        let msg = SsdpMessage::msearch(SSDP_GROUP, VSD_AGENT_ST);
        cx.send_multicast(serialize_message(&msg).expect("valid M-SEARCH"));
        cx.set_timer(self.opts.vsd_search_timeout, TAG_VSD_TIMEOUT | (self.attempt << 8));
    }

    fn retry_later(&mut self, cx: &mut dyn Context) {
        self.enrollment = Enrollment::Idle;
        if self.opts.mode == EnrollMode::Auto && !self.departed {
            cx.set_timer(self.opts.vsd_retry_interval, TAG_VSD_RETRY);
        }
    }

    /// Fetches the VSD-Agent description at `location` and then invokes
    /// Service-add for every locally advertised service.
    pub fn enroll(&mut self, cx: &mut dyn Context, location: Url) {
        match socket_addr_of(&location) {
            Ok(addr) => {
                self.enrollment = Enrollment::Fetching;
                let req = HttpRequest::new("GET", request_target(&location))
                    .with_header("HOST", addr.to_string());
                let id = cx.request(addr, req);
                self.calls.insert(id, Call::AgentDescription(location));
            }
            Err(e) => {
                log::warn!("VSD location {location} unusable: {e}");
                self.retry_later(cx);
            }
        }
    }

    fn call_agent(&mut self, cx: &mut dyn Context, control: &Url, action: &str, services: Vec<usize>) -> bool {
        let Ok(addr) = socket_addr_of(control) else { return false };
        let body = AgentRequest {
            action: action.to_string(),
            owner: self.cfg.id.clone(),
            services: services.iter().map(|&i| self.info(i)).collect(),
        };
        let req = HttpRequest::new("POST", request_target(control))
            .with_header("HOST", addr.to_string())
            .with_json(serde_json::to_vec(&body).expect("serializable"));
        let id = cx.request(addr, req);
        self.calls.insert(
            id,
            Call::Agent {
                action: action.to_string(),
                services,
            },
        );
        true
    }

    fn on_agent_description(&mut self, cx: &mut dyn Context, location: Url, result: Result<HttpResponse, TransportError>) {
        let doc = match result {
            Ok(resp) if resp.status == 200 => decode_description(&resp.body)
                .ok()
                .and_then(|d| VsdAgentDescription::try_from(d).ok()),
            _ => None,
        };
        let Some(agent) = doc else {
            log::warn!("no usable VSD-Agent description at {location}");
            self.retry_later(cx);
            return;
        };
        let Ok(control) = location.join(agent.control_url()) else {
            self.retry_later(cx);
            return;
        };
        let local: Vec<usize> = (0..self.services.len())
            .filter(|&i| self.services[i].delegation == Delegation::Local)
            .collect();
        for &i in &local {
            self.services[i].delegation = Delegation::Pending;
        }
        if !self.call_agent(cx, &control, SERVICE_ADD, local.clone()) {
            for i in local {
                self.services[i].delegation = Delegation::Local;
            }
            self.retry_later(cx);
            return;
        }
        self.enrollment = Enrollment::Adding;
        self.pending_control = Some(control);
    }

    fn on_agent_reply(
        &mut self,
        cx: &mut dyn Context,
        action: String,
        services: Vec<usize>,
        result: Result<HttpResponse, TransportError>,
    ) {
        let reply: Option<AgentResponse> = match &result {
            Ok(resp) if resp.status == 200 => serde_json::from_slice(&resp.body).ok(),
            _ => None,
        };
        if action != SERVICE_ADD {
            if reply.is_none() {
                log::warn!("{action} failed: {:?}", result.err());
            }
            if action == SERVICE_REMOVE {
                for i in services {
                    self.services[i].delegation = Delegation::Local;
                }
            }
            return;
        }
        let control = self.pending_control.take();
        let mut accepted = 0;
        for (pos, &i) in services.iter().enumerate() {
            let ok = reply
                .as_ref()
                .and_then(|r| r.results.get(pos))
                .is_some_and(|r| r.status == ItemStatus::Ok);
            self.services[i].delegation = if ok {
                accepted += 1;
                Delegation::Delegated
            } else {
                Delegation::Local
            };
        }
        match control {
            Some(control) if accepted > 0 => {
                self.enrollment = Enrollment::Enrolled(control);
                let all = self.services.iter().all(|s| s.delegation == Delegation::Delegated);
                if all && self.opts.leave_group_when_delegated && self.in_group {
                    cx.set_multicast_membership(false);
                    self.in_group = false;
                }
            }
            _ => self.retry_later(cx),
        }
    }

    /// Withdraws from the network: stops advertising and replying, and asks
    /// the VSD to drop delegated services. Returns true when a
    /// Service-remove was sent.
    pub fn announce_departure(&mut self, cx: &mut dyn Context) -> bool {
        self.departed = true;
        let Enrollment::Enrolled(control) = self.enrollment.clone() else {
            return false;
        };
        let delegated: Vec<usize> = (0..self.services.len())
            .filter(|&i| self.services[i].delegation == Delegation::Delegated)
            .collect();
        !delegated.is_empty() && self.call_agent(cx, &control, SERVICE_REMOVE, delegated)
    }

    /// Adds an action to a hosted service and, if the service is
    /// delegated, pushes the new description with Service-update.
    pub fn add_action(&mut self, cx: &mut dyn Context, service_name: &str, action: ActionSpec) -> Result<(), SdConfigError> {
        let index = self
            .services
            .iter()
            .position(|s| s.spec.name == service_name)
            .ok_or_else(|| SdConfigError::Invalid(format!("no service {service_name}")))?;
        let mut spec = self.services[index].spec.clone();
        spec.actions.push(action);
        let mut cfg = self.cfg.clone();
        cfg.services[index] = spec.clone();
        cfg.validate()?;
        self.cfg = cfg;
        self.services[index].doc = encode_description(&build_description(&spec));
        self.services[index].spec = spec;
        if let Enrollment::Enrolled(control) = self.enrollment.clone() {
            if self.services[index].delegation == Delegation::Delegated {
                self.call_agent(cx, &control, SERVICE_UPDATE, vec![index]);
            }
        }
        Ok(())
    }

    fn locate(&self, path: &str) -> Option<(usize, &'static str)> {
        self.services.iter().enumerate().find_map(|(i, s)| {
            ["description", "control", "events"]
                .into_iter()
                .find(|leaf| service_path(&s.spec.name, leaf) == path)
                .map(|leaf| (i, leaf))
        })
    }

    /// Runs an action on a hosted service.
    pub fn handle_control(
        &mut self,
        cx: &mut dyn Context,
        service: usize,
        req: &ControlRequest,
    ) -> Result<Map<String, Value>, ControlFault> {
        let fault = |error, detail: String| ControlFault { error, detail };
        let hosted = &self.services[service];
        let spec = hosted
            .spec
            .actions
            .iter()
            .find(|a| a.name == req.action)
            .cloned()
            .ok_or_else(|| fault(ControlError::UnknownAction, req.action.clone()))?;
        let sig = signature(&hosted.spec, &spec);
        for name in req.args.keys() {
            if !sig.inputs().any(|a| &a.name == name) {
                return Err(fault(ControlError::ArgumentTypeError, format!("unexpected argument {name}")));
            }
        }
        for input in sig.inputs() {
            match req.args.get(&input.name) {
                Some(v) if input.type_tag.accepts(v) => {}
                _ => {
                    return Err(fault(
                        ControlError::ArgumentTypeError,
                        format!("argument {} must be {:?}", input.name, input.type_tag),
                    ))
                }
            }
        }
        let mut out = Map::new();
        match spec.primitive {
            Primitive::Echo => {
                out.insert("out".into(), req.args["in"].clone());
            }
            Primitive::Get => {
                let var = spec.variable.as_deref().unwrap_or_default();
                let value = hosted
                    .state
                    .get(var)
                    .cloned()
                    .ok_or_else(|| fault(ControlError::HandlerFailure, format!("no variable {var}")))?;
                out.insert("value".into(), value);
            }
            Primitive::Set => {
                let var = spec.variable.clone().unwrap_or_default();
                let value = req.args["value"].clone();
                let hosted = &mut self.services[service];
                let previous = hosted
                    .state
                    .insert(var.clone(), value.clone())
                    .ok_or_else(|| fault(ControlError::HandlerFailure, format!("no variable {var}")))?;
                let evented = hosted.spec.variables.iter().any(|v| v.name == var && v.evented);
                if evented && previous != value {
                    self.publish(cx, service, BTreeMap::from([(var, value)]));
                }
                out.insert("previous".into(), previous);
            }
        }
        Ok(out)
    }

    fn publish(&mut self, cx: &mut dyn Context, service: usize, changes: BTreeMap<String, Value>) {
        let subs = &mut self.services[service].subs;
        let mut requests = Vec::new();
        for sub in subs.iter_mut() {
            sub.seq += 1;
            let body = EventNotification {
                sid: sub.sid.clone(),
                seq: sub.seq,
                changes: changes.clone(),
            };
            let Ok(addr) = socket_addr_of(&sub.callback) else { continue };
            let req = HttpRequest::new("NOTIFY", request_target(&sub.callback))
                .with_header("HOST", addr.to_string())
                .with_header("NT", "upnp:event")
                .with_header("NTS", "upnp:propchange")
                .with_header("SID", sub.sid.clone())
                .with_header("SEQ", sub.seq.to_string())
                .with_json(serde_json::to_vec(&body).expect("serializable"));
            requests.push((addr, req));
        }
        for (addr, req) in requests {
            let id = cx.request(addr, req);
            self.calls.insert(id, Call::Notify);
            self.stats.notifications += 1;
        }
    }

    fn handle_events(&mut self, service: usize, req: &HttpRequest) -> HttpResponse {
        match req.method.as_str() {
            "SUBSCRIBE" => {
                let callback = req
                    .header("CALLBACK")
                    .map(|c| c.trim().trim_start_matches('<').trim_end_matches('>'))
                    .and_then(|c| Url::parse(c).ok());
                let Some(callback) = callback else {
                    return HttpResponse::new(412);
                };
                let sid = format!("uuid:{}-sub-{}", self.cfg.id, self.next_sid);
                self.next_sid += 1;
                self.services[service].subs.push(Subscription {
                    sid: sid.clone(),
                    callback,
                    seq: 0,
                });
                self.stats.subscriptions += 1;
                HttpResponse::ok_json(serde_json::json!({ "sid": sid }).to_string().into_bytes())
                    .with_header("SID", sid)
                    .with_header("TIMEOUT", "Second-1800")
            }
            "UNSUBSCRIBE" => {
                let subs = &mut self.services[service].subs;
                let before = subs.len();
                let sid = req.header("SID").unwrap_or_default();
                subs.retain(|s| s.sid != sid);
                if subs.len() < before {
                    HttpResponse::new(200)
                } else {
                    HttpResponse::new(412)
                }
            }
            _ => HttpResponse::new(405),
        }
    }
}

impl Node for SdNode {
    fn start(&mut self, cx: &mut dyn Context) {
        self.base = Some(http_base(cx.http_addr()));
        self.advertise_tick(cx);
        cx.set_timer(self.opts.advertisement_interval, TAG_ADVERTISE);
        if self.opts.mode == EnrollMode::Auto {
            self.discover_vsd(cx);
        }
    }

    fn on_datagram(&mut self, cx: &mut dyn Context, from: SocketAddr, payload: &[u8]) {
        let msg = match parse_message(payload) {
            Ok(m) => m,
            Err(e) => {
                log::debug!("ignoring datagram from {from}: {e}");
                return;
            }
        };
        match msg.kind {
            MessageKind::MSearch => {
                self.handle_discovery(cx, from, &msg);
            }
            MessageKind::SearchResponse if msg.search_target == VSD_AGENT_ST => {
                if matches!(self.enrollment, Enrollment::Searching(_)) {
                    if let Some(location) = msg.location.as_deref().and_then(|l| Url::parse(l).ok()) {
                        self.enroll(cx, location);
                    }
                }
            }
            _ => {}
        }
    }

    fn on_request(&mut self, cx: &mut dyn Context, id: InboundId, _from: SocketAddr, req: HttpRequest) {
        let Some((service, leaf)) = self.locate(req.path()) else {
            cx.respond(id, HttpResponse::not_found());
            return;
        };
        let resp = match (leaf, req.method.as_str()) {
            ("description", "GET") => HttpResponse::ok_json(self.services[service].doc.clone()),
            ("control", "POST") => {
                self.stats.control_requests += 1;
                match serde_json::from_slice::<ControlRequest>(&req.body) {
                    Ok(control) => match self.handle_control(cx, service, &control) {
                        Ok(out) => HttpResponse::ok_json(
                            serde_json::to_vec(&ControlReply {
                                action: control.action,
                                out,
                            })
                            .expect("serializable"),
                        ),
                        Err(fault) => HttpResponse::new(500)
                            .with_json(serde_json::to_vec(&fault).expect("serializable")),
                    },
                    Err(e) => HttpResponse::new(500).with_json(
                        serde_json::to_vec(&ControlFault {
                            error: ControlError::ArgumentTypeError,
                            detail: e.to_string(),
                        })
                        .expect("serializable"),
                    ),
                }
            }
            ("events", _) => self.handle_events(service, &req),
            _ => HttpResponse::new(405),
        };
        cx.respond(id, resp);
    }

    fn on_response(&mut self, cx: &mut dyn Context, id: OutboundId, result: Result<HttpResponse, TransportError>) {
        match self.calls.remove(&id) {
            Some(Call::AgentDescription(location)) => self.on_agent_description(cx, location, result),
            Some(Call::Agent { action, services }) => self.on_agent_reply(cx, action, services, result),
            Some(Call::Notify) | None => {}
        }
    }

    fn on_timer(&mut self, cx: &mut dyn Context, tag: u64) {
        match tag & 0xff {
            TAG_ADVERTISE => {
                if !self.stopped && !self.departed {
                    self.advertise_tick(cx);
                    cx.set_timer(self.opts.advertisement_interval, TAG_ADVERTISE);
                }
            }
            TAG_VSD_TIMEOUT => {
                if self.enrollment == Enrollment::Searching(tag >> 8) {
                    self.retry_later(cx);
                }
            }
            TAG_VSD_RETRY if self.enrollment == Enrollment::Idle && !self.departed && !self.stopped => {
                self.discover_vsd(cx);
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
    use crate::cp_client::{ControlPoint, CpError};
    use crate::descriptions::decode_description;
    use crate::netfab::sim::{SimNet, SimNetConfig};
    use crate::netfab::{LinkClass, Transport};
    use crate::ssdp::SSDP_ALL;
    use crate::vsd_daemon::{VsdConfig, VsdNode};
    use serde_json::json;

    const WAIT: Duration = Duration::from_secs(1);

    struct Rig {
        net: SimNet,
        sd: usize,
        vsd: Option<usize>,
        cp: usize,
    }

    fn rig(mode: EnrollMode, with_vsd: bool) -> Rig {
        let mut net = SimNet::new(SimNetConfig::default()).unwrap();
        let vsd = with_vsd.then(|| {
            let node = VsdNode::new(VsdConfig::default()).unwrap();
            net.add_node("vsd", LinkClass::WIFI, true, Box::new(node), Duration::ZERO)
        });
        let opts = SdOptions {
            mode,
            ..SdOptions::default()
        };
        let node = SdNode::new(SdConfig::demo("sd1", 3, 1), opts).unwrap();
        let sd = net.add_node("sd", LinkClass::LLN, true, Box::new(node), Duration::ZERO);
        let cp = net.add_device("cp", LinkClass::WIFI, true);
        net.run_until(Duration::from_secs(10));
        Rig { net, sd, vsd, cp }
    }

    fn args(v: Value) -> Map<String, Value> {
        v.as_object().unwrap().clone()
    }

    fn describe(rig: &mut Rig, st: &str) -> (Url, ServiceDescription) {
        let mut client = rig.net.client(rig.cp);
        let mut cp = ControlPoint::new(&mut client);
        let found = cp.discover(st, WAIT).unwrap();
        assert_eq!(found.len(), 1, "{found:?}");
        let doc = cp.describe(&found[0].location).unwrap();
        (found[0].location.clone(), doc)
    }

    #[test]
    fn demo_config_is_valid_and_parses_from_toml() {
        SdConfig::demo("x", 3, 2).validate().unwrap();
        let text = r#"
            id = "lamp"
            [[services]]
            name = "switch"
            type = "urn:x:service:Switch:1"
            [[services.actions]]
            name = "SetPower"
            primitive = "set"
            variable = "power"
            [[services.actions]]
            name = "GetPower"
            primitive = "get"
            variable = "power"
            [[services.variables]]
            name = "power"
            type = "bool"
            evented = true
            initial = false
        "#;
        let cfg = SdConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.services[0].actions.len(), 2);
        let broken = text.replace("variable = \"power\"\n            [[services.actions]]", "variable = \"nope\"\n            [[services.actions]]");
        assert!(matches!(SdConfig::from_toml_str(&broken), Err(SdConfigError::Invalid(_))));
        let wrong_initial = text.replace("initial = false", "initial = 3");
        assert!(SdConfig::from_toml_str(&wrong_initial).is_err());
    }

    #[test]
    fn baseline_answers_discovery_and_control() {
        let mut rig = rig(EnrollMode::Baseline, false);
        {
            let mut client = rig.net.client(rig.cp);
            let mut cp = ControlPoint::new(&mut client);
            assert_eq!(cp.discover(SSDP_ALL, WAIT).unwrap().len(), 3);
            assert!(cp.discover("urn:other", WAIT).unwrap().is_empty());
        }
        let (loc, doc) = describe(&mut rig, DEMO_TYPE);
        let mut client = rig.net.client(rig.cp);
        let mut cp = ControlPoint::new(&mut client);
        let out = cp.invoke_action(&loc, &doc, "Echo", args(json!({"in": "hi"}))).unwrap();
        assert_eq!(out["out"], json!("hi"));
        let out = cp.invoke_action(&loc, &doc, "SetLevel", args(json!({"value": 7}))).unwrap();
        assert_eq!(out["previous"], json!(0));
        assert!(matches!(
            cp.invoke_action(&loc, &doc, "Nope", Map::new()),
            Err(CpError::UnknownAction(_))
        ));
        assert!(matches!(
            cp.invoke_action(&loc, &doc, "SetLevel", args(json!({"value": "x"}))),
            Err(CpError::ArgumentType(_))
        ));
        let node = rig.net.node::<SdNode>(rig.sd).unwrap();
        assert_eq!(node.state_value("service-0", "level"), Some(&json!(7)));
        assert_eq!(node.mode(), SdMode::Baseline);
    }

    #[test]
    fn faults_come_back_typed() {
        let mut rig = rig(EnrollMode::Baseline, false);
        let (loc, _) = describe(&mut rig, DEMO_TYPE);
        let addr = socket_addr_of(&loc).unwrap();
        let body = serde_json::to_vec(&json!({"action": "Missing", "args": {}})).unwrap();
        let resp = rig
            .net
            .client(rig.cp)
            .request(addr, HttpRequest::new("POST", service_path("service-0", "control")).with_json(body))
            .unwrap();
        assert_eq!(resp.status, 500);
        let fault: ControlFault = serde_json::from_slice(&resp.body).unwrap();
        assert_eq!(fault.error, ControlError::UnknownAction);
    }

    #[test]
    fn notifies_every_subscriber_on_change_only() {
        let mut rig = rig(EnrollMode::Baseline, false);
        let (loc, doc) = describe(&mut rig, DEMO_TYPE);
        let other = rig.net.add_device("cp2", LinkClass::WIFI, false);
        let mut sids = Vec::new();
        for dev in [rig.cp, other] {
            let mut client = rig.net.client(dev);
            let callback = client.callback_url().unwrap();
            sids.push(ControlPoint::new(&mut client).subscribe(&loc, &doc, &callback).unwrap());
        }
        assert_ne!(sids[0], sids[1]);
        assert_eq!(rig.net.node::<SdNode>(rig.sd).unwrap().subscriber_count("service-0"), 2);
        let mut client = rig.net.client(rig.cp);
        let mut cp = ControlPoint::new(&mut client);
        cp.invoke_action(&loc, &doc, "SetLevel", args(json!({"value": 5}))).unwrap();
        cp.invoke_action(&loc, &doc, "SetLevel", args(json!({"value": 5}))).unwrap();
        rig.net.run_until(rig.net.now() + WAIT);
        for (dev, sid) in [rig.cp, other].into_iter().zip(&sids) {
            let got = rig.net.take_notifications(dev);
            assert_eq!(got.len(), 1);
            assert_eq!(got[0].header("SID"), Some(sid.as_str()));
            assert_eq!(got[0].header("SEQ"), Some("1"));
            let body: EventNotification = serde_json::from_slice(&got[0].body).unwrap();
            assert_eq!(body.changes["level"], json!(5));
        }
    }

    #[test]
    fn bad_callback_is_refused() {
        let mut rig = rig(EnrollMode::Baseline, false);
        let (loc, _) = describe(&mut rig, DEMO_TYPE);
        let addr = socket_addr_of(&loc).unwrap();
        let resp = rig
            .net
            .client(rig.cp)
            .request(addr, HttpRequest::new("SUBSCRIBE", service_path("service-0", "events")).with_header("CALLBACK", "not a url"))
            .unwrap();
        assert_eq!(resp.status, 412);
    }

    #[test]
    fn enrolls_and_goes_quiet() {
        let mut rig = rig(EnrollMode::Auto, true);
        let vsd = rig.vsd.unwrap();
        let node = rig.net.node::<SdNode>(rig.sd).unwrap();
        assert!(matches!(node.mode(), SdMode::Delegated(_)));
        for i in 0..3 {
            assert_eq!(node.delegation(&format!("service-{i}")), Some(Delegation::Delegated));
        }
        assert!(!rig.net.is_member(rig.sd));
        let replies_before = node.stats().discovery_replies;
        let (loc, doc) = describe(&mut rig, DEMO_TYPE);
        assert_eq!(socket_addr_of(&loc).unwrap(), rig.net.http_addr(vsd));
        assert_eq!(rig.net.node::<SdNode>(rig.sd).unwrap().stats().discovery_replies, replies_before);

        let mut client = rig.net.client(rig.cp);
        let mut cp = ControlPoint::new(&mut client);
        let out = cp.invoke_action(&loc, &doc, "Echo", args(json!({"in": "3"}))).unwrap();
        assert_eq!(out["out"], json!("3"));
        cp.max_redirects = 0;
        assert_eq!(
            cp.invoke_action(&loc, &doc, "Echo", args(json!({"in": "3"}))),
            Err(CpError::RedirectLoop(0))
        );
    }

    #[test]
    fn stays_local_without_a_vsd() {
        let mut rig = rig(EnrollMode::Auto, false);
        let node = rig.net.node::<SdNode>(rig.sd).unwrap();
        assert_eq!(node.delegation("service-0"), Some(Delegation::Local));
        assert!(rig.net.is_member(rig.sd));
        let (loc, _) = describe(&mut rig, DEMO_TYPE);
        assert_eq!(socket_addr_of(&loc).unwrap(), rig.net.http_addr(rig.sd));
    }

    #[test]
    fn late_vsd_is_found_on_retry() {
        let mut net = SimNet::new(SimNetConfig::default()).unwrap();
        let node = SdNode::new(SdConfig::demo("sd1", 1, 1), SdOptions::default()).unwrap();
        let sd = net.add_node("sd", LinkClass::LLN, true, Box::new(node), Duration::ZERO);
        let vsd = VsdNode::new(VsdConfig::default()).unwrap();
        net.add_node("vsd", LinkClass::WIFI, true, Box::new(vsd), Duration::from_secs(20));
        net.run_until(Duration::from_secs(30));
        assert_eq!(net.node::<SdNode>(sd).unwrap().delegation("service-0"), Some(Delegation::Local));
        net.run_until(Duration::from_secs(70));
        assert_eq!(net.node::<SdNode>(sd).unwrap().delegation("service-0"), Some(Delegation::Delegated));
    }

    #[test]
    fn added_action_reaches_the_vsd_copy() {
        let mut rig = rig(EnrollMode::Auto, true);
        let spec = ActionSpec {
            name: "GetLevel".into(),
            primitive: Primitive::Get,
            variable: Some("level".into()),
            type_tag: None,
        };
        rig.net
            .with_node::<SdNode, _>(rig.sd, |n, cx| n.add_action(cx, "service-0", spec))
            .unwrap()
            .unwrap();
        rig.net.run_until(rig.net.now() + Duration::from_secs(5));
        let (loc, doc) = describe(&mut rig, DEMO_TYPE);
        assert!(doc.action("GetLevel").is_some());
        let served = ControlPoint::new(&mut rig.net.client(rig.cp)).describe_bytes(&loc).unwrap();
        let original = rig.net.node::<SdNode>(rig.sd).unwrap().description_bytes("service-0").unwrap();
        assert_eq!(served, original);
        assert_eq!(decode_description(&served).unwrap(), doc);
    }

    #[test]
    fn departure_removes_delegated_services() {
        let mut rig = rig(EnrollMode::Auto, true);
        let sent = rig
            .net
            .with_node::<SdNode, _>(rig.sd, |n, cx| n.announce_departure(cx))
            .unwrap();
        assert!(sent);
        rig.net.run_until(rig.net.now() + Duration::from_secs(5));
        let reg = rig.net.node::<VsdNode>(rig.vsd.unwrap()).unwrap().registry().unwrap();
        assert_eq!(reg.map.len(), 0);
    }
}
