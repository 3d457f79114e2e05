//! The Virtual Service Device.
//!
//! Answers VSD discovery, runs the VSD-Agent enrollment actions, serves
//! delegated descriptions, multicasts advertisements for every delegated
//! service, answers discovery on the owners' behalf and redirects control
//! and eventing to the owners with `302 Found`.

use std::collections::HashMap;
use std::net::{SocketAddr, SocketAddrV4};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use url::Url;

use crate::descriptions::{
    decode_description, encode_description, VsdAgentDescription, SERVICE_ADD, SERVICE_REMOVE,
    SERVICE_UPDATE,
};
use crate::http::{HttpRequest, HttpResponse};
use crate::netfab::{
    http_base, request_target, socket_addr_of, Context, InboundId, Node, OutboundId,
    TransportError,
};
use crate::service_registry::{Owner, Registry, RegistryError, ServiceInfo};
use crate::ssdp::{
    matches_search_target, parse_message, serialize_message, usn_for, MessageKind, SsdpMessage,
    SSDP_GROUP, VSD_AGENT_ST,
};

pub const AGENT_DESCRIPTION_PATH: &str = "/vsd-agent/description";

const TAG_ADVERTISE: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct VsdConfig {
    pub listen: SocketAddr,
    pub group: SocketAddrV4,
    pub advertisement_interval: Duration,
    pub vsd_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid VSD config: {0}")]
pub struct VsdConfigError(String);

impl Default for VsdConfig {
    fn default() -> Self {
        VsdConfig {
            listen: "0.0.0.0:8080".parse().expect("static address"),
            group: SSDP_GROUP.parse().expect("static address"),
            advertisement_interval: Duration::from_secs(120),
            vsd_id: "vsd".into(),
        }
    }
}

impl VsdConfig {
    pub fn validate(&self) -> Result<(), VsdConfigError> {
        if self.advertisement_interval.is_zero() {
            return Err(VsdConfigError("advertisement interval must be positive".into()));
        }
        if self.vsd_id.is_empty() || self.vsd_id.contains('/') {
            return Err(VsdConfigError(format!("bad VSD id {:?}", self.vsd_id)));
        }
        Ok(())
    }

    fn max_age(&self) -> u32 {
        (self.advertisement_interval.as_secs() * 3).clamp(1, u64::from(u32::MAX)) as u32
    }
}

/// Body of a VSD-Agent control request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentRequest {
    pub action: String,
    pub owner: String,
    pub services: Vec<ServiceInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ItemStatus {
    Ok,
    Unreachable,
    SchemaViolation,
    NotFound,
    NotOwner,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemResult {
    pub service_name: String,
    pub service_type: String,
    pub status: ItemStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delegated_location: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

/// Body of a VSD-Agent control response; one result per requested item,
/// in request order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentResponse {
    pub action: String,
    pub results: Vec<ItemResult>,
}

/// Counters of what the daemon has sent, for inspection.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct VsdStats {
    pub advertisements: u64,
    pub discovery_replies: u64,
    pub agent_replies: u64,
    pub redirects: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Action {
    Add,
    Remove,
    Update,
}

impl Action {
    fn parse(name: &str) -> Option<Action> {
        match name {
            SERVICE_ADD => Some(Action::Add),
            SERVICE_REMOVE => Some(Action::Remove),
            SERVICE_UPDATE => Some(Action::Update),
            _ => None,
        }
    }
}

#[derive(Debug)]
enum Slot {
    Failed(ItemStatus, String),
    Fetching,
    Fetched(Vec<u8>),
}

/// A Service-add or Service-update waiting for description fetches.
#[derive(Debug)]
struct Job {
    inbound: InboundId,
    action: String,
    owner: Owner,
    infos: Vec<ServiceInfo>,
    slots: Vec<Slot>,
    outstanding: usize,
}

pub struct VsdNode {
    cfg: VsdConfig,
    agent_doc: Vec<u8>,
    registry: Option<Registry>,
    /// Path on this VSD → absolute owner URL, for every delegated
    /// description whose control or event URL is relative.
    redirects: HashMap<String, Url>,
    jobs: HashMap<u64, Job>,
    fetches: HashMap<OutboundId, (u64, usize)>,
    next_job: u64,
    stopped: bool,
    stats: VsdStats,
}

impl VsdNode {
    pub fn new(cfg: VsdConfig) -> Result<Self, VsdConfigError> {
        cfg.validate()?;
        Ok(VsdNode {
            cfg,
            agent_doc: encode_description(VsdAgentDescription::new().description()),
            registry: None,
            redirects: HashMap::new(),
            jobs: HashMap::new(),
            fetches: HashMap::new(),
            next_job: 0,
            stopped: false,
            stats: VsdStats::default(),
        })
    }

    pub fn config(&self) -> &VsdConfig {
        &self.cfg
    }

    /// `None` before the node has started.
    pub fn registry(&self) -> Option<&Registry> {
        self.registry.as_ref()
    }

    pub fn stats(&self) -> VsdStats {
        self.stats
    }

    pub fn agent_location(base: &Url) -> Url {
        base.join(AGENT_DESCRIPTION_PATH).expect("static path")
    }

    /// Multicasts one advertisement per delegated service. Returns the
    /// number sent.
    pub fn multicast_advertisement(&mut self, cx: &mut dyn Context) -> usize {
        let Some(registry) = &self.registry else { return 0 };
        let max_age = self.cfg.max_age();
        let mut sent = 0;
        for entry in registry.map.iter() {
            let msg = SsdpMessage::notify(
                SSDP_GROUP,
                entry.key.service_type.clone(),
                entry.delegated_location.as_str(),
                usn_for(&entry.owner.id, &entry.key.name),
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

    /// Replies to an M-SEARCH: the VSD-Agent location for VSD discovery,
    /// otherwise one reply per matching delegated service.
    pub fn handle_discovery(&mut self, cx: &mut dyn Context, from: SocketAddr, msg: &SsdpMessage) -> usize {
        let Some(registry) = &self.registry else { return 0 };
        let max_age = self.cfg.max_age();
        let mut replies = Vec::new();
        if msg.search_target == VSD_AGENT_ST {
            let location = Self::agent_location(&http_base(cx.http_addr()));
            replies.push(SsdpMessage::search_response(
                VSD_AGENT_ST,
                location.as_str(),
                usn_for(&self.cfg.vsd_id, "VSD-Agent"),
                max_age,
            ));
            self.stats.agent_replies += 1;
        } else {
            for entry in registry.map.iter() {
                if matches_search_target(&entry.key.service_type, &msg.search_target) {
                    replies.push(SsdpMessage::search_response(
                        entry.key.service_type.clone(),
                        entry.delegated_location.as_str(),
                        usn_for(&entry.owner.id, &entry.key.name),
                        max_age,
                    ));
                }
            }
            self.stats.discovery_replies += replies.len() as u64;
        }
        let count = replies.len();
        for reply in replies {
            if let Ok(bytes) = serialize_message(&reply) {
                cx.send_datagram(from, bytes);
            }
        }
        count
    }

    fn rebuild_redirects(&mut self) {
        self.redirects.clear();
        let Some(registry) = &self.registry else { return };
        for entry in registry.map.iter() {
            let Some(bytes) = registry.directory.resolve(&entry.delegated_location) else {
                continue;
            };
            let Ok(doc) = decode_description(bytes) else { continue };
            for (relative, target) in [
                (&doc.control_url, &entry.control_url),
                (&doc.event_url, &entry.event_url),
            ] {
                if let Ok(at) = entry.delegated_location.join(relative) {
                    if at.origin() == entry.delegated_location.origin() {
                        self.redirects.insert(at.path().to_string(), target.clone());
                    }
                }
            }
        }
    }

    fn respond_agent(cx: &mut dyn Context, id: InboundId, action: &str, results: Vec<ItemResult>) {
        let body = serde_json::to_vec(&AgentResponse {
            action: action.to_string(),
            results,
        })
        .expect("serializable");
        cx.respond(id, HttpResponse::ok_json(body));
    }

    fn handle_agent(&mut self, cx: &mut dyn Context, id: InboundId, from: SocketAddr, req: &HttpRequest) {
        let parsed: Result<AgentRequest, _> = serde_json::from_slice(&req.body);
        let request = match parsed {
            Ok(r) => r,
            Err(e) => {
                let body = serde_json::json!({"error": "SchemaViolation", "detail": e.to_string()});
                cx.respond(id, HttpResponse::new(500).with_json(body.to_string().into_bytes()));
                return;
            }
        };
        let Some(action) = Action::parse(&request.action) else {
            let body = serde_json::json!({"error": "UnknownAction", "detail": request.action});
            cx.respond(id, HttpResponse::new(500).with_json(body.to_string().into_bytes()));
            return;
        };
        if request.owner.is_empty() || request.owner.contains('/') {
            let body = serde_json::json!({"error": "SchemaViolation", "detail": "bad owner id"});
            cx.respond(id, HttpResponse::new(500).with_json(body.to_string().into_bytes()));
            return;
        }
        let owner = Owner {
            id: request.owner.clone(),
            addr: from.ip(),
        };
        let registry = self.registry.as_mut().expect("started");

        if action == Action::Remove {
            let results = request
                .services
                .iter()
                .map(|info| {
                    let key = info.key();
                    let outcome = registry.remove(&owner, &key);
                    item(info, status_of(&outcome), None, outcome.err().map(|e| e.to_string()))
                })
                .collect();
            self.rebuild_redirects();
            Self::respond_agent(cx, id, &request.action, results);
            return;
        }

        let job_id = self.next_job;
        self.next_job += 1;
        let mut job = Job {
            inbound: id,
            action: request.action.clone(),
            owner: owner.clone(),
            infos: request.services.clone(),
            slots: Vec::new(),
            outstanding: 0,
        };
        for (index, info) in request.services.iter().enumerate() {
            let key = info.key();
            let precheck = match action {
                Action::Update => registry.check_owner(&owner, &key).map(|_| ()),
                _ => match registry.check_owner(&owner, &key) {
                    Err(RegistryError::NotOwner) => Err(RegistryError::NotOwner),
                    _ => Ok(()),
                },
            };
            if let Err(e) = precheck {
                job.slots
                    .push(Slot::Failed(status_of::<()>(&Err(e.clone())), e.to_string()));
                continue;
            }
            let resolved = match info.resolve() {
                Ok(r) => r,
                Err(e) => {
                    job.slots.push(Slot::Failed(ItemStatus::SchemaViolation, e.to_string()));
                    continue;
                }
            };
            let location = &resolved.description_location;
            match socket_addr_of(location) {
                Ok(addr) => {
                    let get = HttpRequest::new("GET", request_target(location))
                        .with_header("HOST", addr.to_string());
                    let out = cx.request(addr, get);
                    self.fetches.insert(out, (job_id, index));
                    job.slots.push(Slot::Fetching);
                    job.outstanding += 1;
                }
                Err(e) => job.slots.push(Slot::Failed(ItemStatus::Unreachable, e.to_string())),
            }
        }
        if job.outstanding == 0 {
            self.finish(cx, job);
        } else {
            self.jobs.insert(job_id, job);
        }
    }

    fn on_fetched(&mut self, cx: &mut dyn Context, job_id: u64, index: usize, result: Result<HttpResponse, TransportError>) {
        let Some(job) = self.jobs.get_mut(&job_id) else { return };
        job.slots[index] = match result {
            Ok(resp) if resp.status == 200 => Slot::Fetched(resp.body),
            Ok(resp) => Slot::Failed(ItemStatus::Unreachable, format!("HTTP status {}", resp.status)),
            Err(e) => Slot::Failed(ItemStatus::Unreachable, e.to_string()),
        };
        job.outstanding -= 1;
        if job.outstanding == 0 {
            let job = self.jobs.remove(&job_id).expect("present");
            self.finish(cx, job);
        }
    }

    /// Commits fetched descriptions in request order and answers the caller.
    fn finish(&mut self, cx: &mut dyn Context, job: Job) {
        let registry = self.registry.as_mut().expect("started");
        let now = cx.now();
        let mut results = Vec::with_capacity(job.infos.len());
        for (info, slot) in job.infos.iter().zip(job.slots) {
            let result = match slot {
                Slot::Failed(status, detail) => item(info, status, None, Some(detail)),
                Slot::Fetching => unreachable!("job finished with a fetch outstanding"),
                Slot::Fetched(bytes) => {
                    let resolved = info.resolve().expect("resolved before fetching");
                    match registry.commit(&job.owner, &resolved, bytes, now) {
                        Ok((entry, _)) => item(
                            info,
                            ItemStatus::Ok,
                            Some(entry.delegated_location.to_string()),
                            None,
                        ),
                        Err(e) => {
                            let status = status_of::<()>(&Err(e.clone()));
                            item(info, status, None, Some(e.to_string()))
                        }
                    }
                }
            };
            results.push(result);
        }
        self.rebuild_redirects();
        Self::respond_agent(cx, job.inbound, &job.action, results);
    }
}

fn item(info: &ServiceInfo, status: ItemStatus, location: Option<String>, detail: Option<String>) -> ItemResult {
    ItemResult {
        service_name: info.service_name.clone(),
        service_type: info.service_type.clone(),
        status,
        delegated_location: location,
        detail,
    }
}

fn status_of<T>(outcome: &Result<T, RegistryError>) -> ItemStatus {
    match outcome {
        Ok(_) => ItemStatus::Ok,
        Err(RegistryError::NotOwner) => ItemStatus::NotOwner,
        Err(RegistryError::NotFound) => ItemStatus::NotFound,
        Err(RegistryError::Description(_)) => ItemStatus::SchemaViolation,
    }
}

impl Node for VsdNode {
    fn start(&mut self, cx: &mut dyn Context) {
        self.registry = Some(Registry::new(http_base(cx.http_addr())));
        cx.set_timer(self.cfg.advertisement_interval, TAG_ADVERTISE);
    }

    fn on_datagram(&mut self, cx: &mut dyn Context, from: SocketAddr, payload: &[u8]) {
        match parse_message(payload) {
            Ok(msg) if msg.kind == MessageKind::MSearch => {
                self.handle_discovery(cx, from, &msg);
            }
            Ok(_) => {}
            Err(e) => log::debug!("ignoring datagram from {from}: {e}"),
        }
    }

    fn on_request(&mut self, cx: &mut dyn Context, id: InboundId, from: SocketAddr, req: HttpRequest) {
        let path = req.path().to_string();
        let registry = self.registry.as_ref().expect("started");
        if path == AGENT_DESCRIPTION_PATH && req.method == "GET" {
            cx.respond(id, HttpResponse::ok_json(self.agent_doc.clone()));
            return;
        }
        let agent_control = Self::agent_location(&http_base(cx.http_addr()))
            .join(VsdAgentDescription::new().control_url())
            .expect("static path");
        if path == agent_control.path() {
            if req.method == "POST" {
                self.handle_agent(cx, id, from, &req);
            } else {
                cx.respond(id, HttpResponse::new(405));
            }
            return;
        }
        if req.method == "GET" {
            if let Some(bytes) = registry.directory.resolve_path(&path) {
                cx.respond(id, HttpResponse::ok_json(bytes.to_vec()));
                return;
            }
        }
        match self.redirects.get(&path) {
            Some(target) => {
                self.stats.redirects += 1;
                cx.respond(id, HttpResponse::redirect(target.as_str()));
            }
            None => cx.respond(id, HttpResponse::not_found()),
        }
    }

    fn on_response(&mut self, cx: &mut dyn Context, id: OutboundId, result: Result<HttpResponse, TransportError>) {
        if let Some((job, index)) = self.fetches.remove(&id) {
            self.on_fetched(cx, job, index, result);
        }
    }

    fn on_timer(&mut self, cx: &mut dyn Context, tag: u64) {
        if tag == TAG_ADVERTISE && !self.stopped {
            self.multicast_advertisement(cx);
            cx.set_timer(self.cfg.advertisement_interval, TAG_ADVERTISE);
        }
    }

    fn stop(&mut self, _cx: &mut dyn Context) {
        self.stopped = true;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::descriptions::{ServiceDescription, ActionSignature};
    use crate::netfab::sim::{SimNet, SimNetConfig};
    use crate::netfab::{LinkClass, Transport};
    use crate::ssdp::SSDP_ALL;

    fn doc(name: &str, ty: &str) -> ServiceDescription {
        ServiceDescription {
            service_name: name.into(),
            service_type: ty.into(),
            control_url: "control".into(),
            event_url: "events".into(),
            actions: vec![ActionSignature {
                name: "Ping".into(),
                arguments: vec![],
            }],
            state_variables: vec![],
        }
    }

    /// A scripted service device: an external sim device whose requests we
    /// answer by hand is awkward, so use a tiny node serving fixed paths.
    struct StaticSd {
        docs: HashMap<String, Vec<u8>>,
    }

    impl Node for StaticSd {
        fn start(&mut self, _cx: &mut dyn Context) {}
        fn on_datagram(&mut self, _cx: &mut dyn Context, _from: SocketAddr, _payload: &[u8]) {}
        fn on_request(&mut self, cx: &mut dyn Context, id: InboundId, _from: SocketAddr, req: HttpRequest) {
            let resp = match self.docs.get(req.path()) {
                Some(b) => HttpResponse::ok_json(b.clone()),
                None => HttpResponse::not_found(),
            };
            cx.respond(id, resp);
        }
    }

    struct Rig {
        net: SimNet,
        vsd: usize,
        sd: usize,
        client: usize,
    }

    fn rig(paths: &[(&str, ServiceDescription)]) -> Rig {
        let mut net = SimNet::new(SimNetConfig::default()).unwrap();
        let vsd = net.add_node(
            "vsd",
            LinkClass::WIFI,
            true,
            Box::new(VsdNode::new(VsdConfig::default()).unwrap()),
            Duration::ZERO,
        );
        let docs = paths
            .iter()
            .map(|(p, d)| (p.to_string(), encode_description(d)))
            .collect();
        let sd = net.add_node("sd", LinkClass::LLN, false, Box::new(StaticSd { docs }), Duration::ZERO);
        let client = net.add_device("cp", LinkClass::WIFI, true);
        net.run_until(Duration::from_millis(1));
        Rig { net, vsd, sd, client }
    }

    fn info(rig: &Rig, name: &str, ty: &str, path: &str) -> ServiceInfo {
        let base = http_base(rig.net.http_addr(rig.sd));
        ServiceInfo {
            service_name: name.into(),
            service_type: ty.into(),
            description_location_url: base.join(path).unwrap().to_string(),
            control_url: "control".into(),
            event_url: "events".into(),
        }
    }

    fn call(rig: &mut Rig, from: usize, action: &str, owner: &str, services: Vec<ServiceInfo>) -> AgentResponse {
        let vsd_addr = rig.net.http_addr(rig.vsd);
        let body = serde_json::to_vec(&AgentRequest {
            action: action.into(),
            owner: owner.into(),
            services,
        })
        .unwrap();
        let resp = rig
            .net
            .client(from)
            .request(vsd_addr, HttpRequest::new("POST", "/vsd-agent/control").with_json(body))
            .unwrap();
        assert_eq!(resp.status, 200);
        serde_json::from_slice(&resp.body).unwrap()
    }

    fn statuses(r: &AgentResponse) -> Vec<ItemStatus> {
        r.results.iter().map(|i| i.status).collect()
    }

    fn search(rig: &mut Rig, st: &str) -> Vec<SsdpMessage> {
        let payload = serialize_message(&SsdpMessage::msearch(SSDP_GROUP, st)).unwrap();
        let client = rig.client;
        rig.net
            .client(client)
            .search(&payload, Duration::from_secs(1))
            .unwrap()
            .into_iter()
            .map(|(_, b)| parse_message(&b).unwrap())
            .collect()
    }

    #[test]
    fn answers_vsd_discovery_with_agent_location() {
        let mut rig = rig(&[]);
        let replies = search(&mut rig, VSD_AGENT_ST);
        assert_eq!(replies.len(), 1);
        let loc = Url::parse(replies[0].location.as_deref().unwrap()).unwrap();
        assert_eq!(loc.path(), AGENT_DESCRIPTION_PATH);
        let client = rig.client;
        let doc = crate::descriptions::fetch_description(&loc, &mut rig.net.client(client)).unwrap();
        assert!(VsdAgentDescription::try_from(doc).is_ok());
        assert!(search(&mut rig, "other:thing").is_empty());
    }

    #[test]
    fn partial_add_commits_reachable_items() {
        let mut rig = rig(&[("/a", doc("a", "t:a")), ("/c", doc("c", "t:c"))]);
        let infos = vec![
            info(&rig, "a", "t:a", "/a"),
            info(&rig, "b", "t:b", "/missing"),
            info(&rig, "c", "t:c", "/c"),
        ];
        let sd = rig.sd;
        let r = call(&mut rig, sd, SERVICE_ADD, "sd1", infos);
        assert_eq!(
            statuses(&r),
            vec![ItemStatus::Ok, ItemStatus::Unreachable, ItemStatus::Ok]
        );
        let reg = rig.net.node::<VsdNode>(rig.vsd).unwrap().registry().unwrap();
        assert_eq!(reg.map.len(), 2);
        assert_eq!(reg.directory.len(), 2);
        reg.check_integrity().unwrap();
        assert_eq!(search(&mut rig, SSDP_ALL).len(), 2);
        assert_eq!(search(&mut rig, "t:a").len(), 1);
    }

    #[test]
    fn remove_and_update_check_owner() {
        let mut rig = rig(&[("/a", doc("a", "t:a"))]);
        let a = info(&rig, "a", "t:a", "/a");
        let sd = rig.sd;
        let client = rig.client;
        assert_eq!(statuses(&call(&mut rig, sd, SERVICE_ADD, "sd1", vec![a.clone()])), vec![ItemStatus::Ok]);
        // Same id from another address is a different owner.
        assert_eq!(statuses(&call(&mut rig, client, SERVICE_REMOVE, "sd1", vec![a.clone()])), vec![ItemStatus::NotOwner]);
        assert_eq!(statuses(&call(&mut rig, sd, SERVICE_REMOVE, "sd2", vec![a.clone()])), vec![ItemStatus::NotOwner]);
        assert_eq!(statuses(&call(&mut rig, client, SERVICE_ADD, "x", vec![a.clone()])), vec![ItemStatus::NotOwner]);
        assert_eq!(statuses(&call(&mut rig, sd, SERVICE_UPDATE, "sd1", vec![a.clone()])), vec![ItemStatus::Ok]);
        let ghost = info(&rig, "g", "t:g", "/a");
        assert_eq!(statuses(&call(&mut rig, sd, SERVICE_UPDATE, "sd1", vec![ghost.clone()])), vec![ItemStatus::NotFound]);
        assert_eq!(statuses(&call(&mut rig, sd, SERVICE_REMOVE, "sd1", vec![ghost])), vec![ItemStatus::NotFound]);
        assert_eq!(search(&mut rig, "t:a").len(), 1);
        assert_eq!(statuses(&call(&mut rig, sd, SERVICE_REMOVE, "sd1", vec![a])), vec![ItemStatus::Ok]);
        assert!(search(&mut rig, "t:a").is_empty());
        let reg = rig.net.node::<VsdNode>(rig.vsd).unwrap().registry().unwrap();
        assert!(reg.map.is_empty() && reg.directory.is_empty());
    }

    #[test]
    fn serves_copies_and_redirects() {
        let original = doc("a", "t:a");
        let mut rig = rig(&[("/a", original.clone())]);
        let a = info(&rig, "a", "t:a", "/a");
        let sd = rig.sd;
        let r = call(&mut rig, sd, SERVICE_ADD, "sd1", vec![a]);
        let location = Url::parse(r.results[0].delegated_location.as_deref().unwrap()).unwrap();
        assert_eq!(location.path(), "/delegated/sd1/a/description");
        let vsd_addr = rig.net.http_addr(rig.vsd);
        let client = rig.client;
        let mut c = rig.net.client(client);
        let got = c.request(vsd_addr, HttpRequest::new("GET", location.path())).unwrap();
        assert_eq!(got.body, encode_description(&original));

        let ctl = c.request(vsd_addr, HttpRequest::new("POST", "/delegated/sd1/a/control")).unwrap();
        assert_eq!(ctl.status, 302);
        let sd_base = http_base(rig.net.http_addr(sd));
        assert_eq!(ctl.header("LOCATION"), Some(sd_base.join("/control").unwrap().as_str()));
        let mut c = rig.net.client(client);
        let ev = c.request(vsd_addr, HttpRequest::new("SUBSCRIBE", "/delegated/sd1/a/events")).unwrap();
        assert_eq!(ev.header("LOCATION"), Some(sd_base.join("/events").unwrap().as_str()));
        let missing = c.request(vsd_addr, HttpRequest::new("POST", "/delegated/sd1/zz/control")).unwrap();
        assert_eq!(missing.status, 404);
    }

    #[test]
    fn advertises_each_entry_per_tick() {
        let mut rig = rig(&[("/a", doc("a", "t:a")), ("/b", doc("b", "t:b"))]);
        let infos = vec![info(&rig, "a", "t:a", "/a"), info(&rig, "b", "t:b", "/b")];
        let sd = rig.sd;
        call(&mut rig, sd, SERVICE_ADD, "sd1", infos);
        rig.net.run_until(Duration::from_secs(120 * 3 + 1));
        assert_eq!(rig.net.node::<VsdNode>(rig.vsd).unwrap().stats().advertisements, 6);
        let notifies = rig
            .net
            .take_datagrams(rig.client)
            .into_iter()
            .filter(|(_, b)| parse_message(b).unwrap().kind == MessageKind::Notify)
            .count();
        assert_eq!(notifies, 6);
    }

    #[test]
    fn rejects_bad_requests() {
        let mut rig = rig(&[]);
        let vsd_addr = rig.net.http_addr(rig.vsd);
        let client = rig.client;
        let mut c = rig.net.client(client);
        let r = c
            .request(vsd_addr, HttpRequest::new("POST", "/vsd-agent/control").with_json(b"{".to_vec()))
            .unwrap();
        assert_eq!(r.status, 500);
        let body = serde_json::to_vec(&AgentRequest {
            action: "Discovery-reply".into(),
            owner: "x".into(),
            services: vec![],
        })
        .unwrap();
        let r = c
            .request(vsd_addr, HttpRequest::new("POST", "/vsd-agent/control").with_json(body))
            .unwrap();
        assert_eq!(r.status, 500);
        assert!(VsdNode::new(VsdConfig {
            advertisement_interval: Duration::ZERO,
            ..VsdConfig::default()
        })
        .is_err());
    }
}
