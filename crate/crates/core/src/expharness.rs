//! Energy and throughput experiments on the simulated network.
//!
//! A scenario places one service device (SD), optionally a VSD, a number of
//! participating control points that search periodically and, for
//! throughput runs, a targeted control point that invokes an action every
//! few seconds. Devices boot during a setup window so that enrollment is
//! finished before measurement starts. Metrics cover the half-open window
//! `[setup, setup + duration)` plus a drain period in which in-flight
//! exchanges complete; every periodic activity stops at the window's end.
//!
//! Reports are computed from the event log alone, so a saved log can be
//! turned back into the same report.

use std::collections::HashMap;
use std::fmt::{self, Write as _};
use std::io::{BufRead, Write};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::cp_client::{DiscoveryLoop, Interval, TargetedCp};
use crate::netfab::sim::{DeviceId, FrameClass, LogRecord, SimNet, SimNetConfig};
use crate::netfab::{DeviceCounters, LinkClass};
use crate::sd_agent::{Delegation, EnrollMode, SdConfig, SdNode, SdOptions, DEMO_TYPE};
use crate::ssdp::SSDP_ALL;
use crate::vsd_daemon::{VsdConfig, VsdNode};

/// Version of the [`ScenarioReport`] layout.
pub const REPORT_SCHEMA: u32 = 1;

pub const CSV_HEADER: &str =
    "scheme,class,n_cps,interval_ms,rep,seed,sd_energy,vsd_energy,throughput_bpms";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Baseline,
    Vsdm,
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scheme::Baseline => "baseline",
            Scheme::Vsdm => "vsdm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetClass {
    Lln,
    Wifi,
}

impl NetClass {
    pub fn link(self) -> LinkClass {
        match self {
            NetClass::Lln => LinkClass::LLN,
            NetClass::Wifi => LinkClass::WIFI,
        }
    }

    pub fn parse(s: &str) -> Option<NetClass> {
        match s {
            "lln" => Some(NetClass::Lln),
            "wifi" => Some(NetClass::Wifi),
            _ => None,
        }
    }
}

impl fmt::Display for NetClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            NetClass::Lln => "lln",
            NetClass::Wifi => "wifi",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Workload {
    /// Participants search; nothing else runs.
    Energy,
    /// Participants search while a targeted control point invokes an
    /// action every `control_interval_s`.
    Throughput,
}

/// Time between two searches of a participating control point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiscoveryInterval {
    Fixed { ms: u64 },
    /// Uniform over whole milliseconds, both ends included.
    Random { min_ms: u64, max_ms: u64 },
}

impl DiscoveryInterval {
    pub fn parse(s: &str) -> Option<DiscoveryInterval> {
        let s = s.trim();
        if let Some(range) = s.strip_prefix("random[").and_then(|r| r.strip_suffix(']')) {
            let (lo, hi) = range.split_once([',', '-'])?;
            let (min_ms, max_ms) = (lo.trim().parse().ok()?, hi.trim().parse().ok()?);
            return (min_ms > 0 && min_ms <= max_ms).then_some(DiscoveryInterval::Random { min_ms, max_ms });
        }
        let ms = s.parse().ok()?;
        (ms > 0).then_some(DiscoveryInterval::Fixed { ms })
    }

    /// Uniform over `[t/2, 3t/2]`: mean `t`, never phase-locked to other
    /// periodic traffic.
    pub fn jittered(t_ms: u64) -> DiscoveryInterval {
        DiscoveryInterval::Random {
            min_ms: t_ms / 2,
            max_ms: t_ms + t_ms / 2,
        }
    }

    fn interval(self) -> Interval {
        match self {
            DiscoveryInterval::Fixed { ms } => Interval::Fixed(Duration::from_millis(ms)),
            DiscoveryInterval::Random { min_ms, max_ms } => {
                Interval::Uniform(Duration::from_millis(min_ms), Duration::from_millis(max_ms))
            }
        }
    }
}

impl fmt::Display for DiscoveryInterval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DiscoveryInterval::Fixed { ms } => write!(f, "{ms}"),
            DiscoveryInterval::Random { min_ms, max_ms } => write!(f, "random[{min_ms}-{max_ms}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scheme: Scheme,
    pub workload: Workload,
    /// Class of the SD's interface. Participants are always constrained
    /// devices; the VSD and the targeted control point are on WiFi.
    pub class: NetClass,
    pub n_cps: usize,
    pub discovery_interval: DiscoveryInterval,
    pub advertisement_interval_s: u64,
    pub duration_s: u64,
    pub setup_s: u64,
    pub drain_s: u64,
    pub control_interval_s: u64,
    pub services: usize,
    /// How many of the SD's services match a participant's search.
    pub services_matched: usize,
    /// Participants search with `ssdp:all` instead of the shared type.
    pub search_all: bool,
    /// Participants retrieve the description behind every response.
    pub fetch_descriptions: bool,
    pub beta_tx: f64,
    pub beta_rx: f64,
    pub loss_rate: f64,
    pub seed: u64,
    pub rep: u32,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            scheme: Scheme::Baseline,
            workload: Workload::Energy,
            class: NetClass::Lln,
            n_cps: 1,
            discovery_interval: DiscoveryInterval::Fixed { ms: 1000 },
            advertisement_interval_s: 120,
            duration_s: 1200,
            setup_s: 30,
            drain_s: 30,
            control_interval_s: 10,
            services: 3,
            services_matched: 1,
            search_all: false,
            fetch_descriptions: false,
            beta_tx: 1.0,
            beta_rx: 1.0,
            loss_rate: 0.0,
            seed: 0,
            rep: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScenarioError {
    #[error("invalid scenario: {0}")]
    Config(String),
    #[error("no service access was delivered to the SD")]
    NoServiceAccess,
    #[error("SD did not finish enrolling during the setup window")]
    EnrollmentIncomplete,
    #[error("cannot read event log: {0}")]
    Log(String),
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let bad = |m: &str| Err(ScenarioError::Config(m.to_string()));
        if self.duration_s == 0 {
            return bad("duration must be positive");
        }
        if self.advertisement_interval_s == 0 || self.control_interval_s == 0 {
            return bad("intervals must be positive");
        }
        if let DiscoveryInterval::Fixed { ms: 0 } | DiscoveryInterval::Random { min_ms: 0, .. } =
            self.discovery_interval
        {
            return bad("discovery interval must be positive");
        }
        if self.services == 0 || self.services_matched > self.services {
            return bad("services_matched must be at most the number of services");
        }
        if !(0.0..=1.0).contains(&self.loss_rate) {
            return bad("loss rate outside [0, 1]");
        }
        if self.setup_s < 5 {
            return bad("setup window must leave time to enroll");
        }
        Ok(())
    }

    fn window_start(&self) -> Duration {
        Duration::from_secs(self.setup_s)
    }

    fn window_end(&self) -> Duration {
        Duration::from_secs(self.setup_s + self.duration_s)
    }

    /// Search target used by participants.
    pub fn participant_st(&self) -> &'static str {
        if self.search_all {
            SSDP_ALL
        } else {
            DEMO_TYPE
        }
    }

    /// Services of the SD that answer one participant search.
    pub fn matching_services(&self) -> usize {
        if self.search_all {
            self.services
        } else {
            self.services_matched
        }
    }
}

/// Which simulated device plays which role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Roles {
    pub sd: DeviceId,
    pub vsd: Option<DeviceId>,
    pub targeted: Option<DeviceId>,
    pub participants: Vec<DeviceId>,
}

/// Everything needed to recompute a report: the scenario, the role map and
/// the full event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunArtifact {
    pub config: ScenarioConfig,
    pub roles: Roles,
    pub log: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub schema: u32,
    pub scheme: Scheme,
    pub class: NetClass,
    pub n_cps: usize,
    pub discovery_interval: DiscoveryInterval,
    pub rep: u32,
    pub seed: u64,
    pub sd: DeviceCounters,
    pub vsd: DeviceCounters,
    pub sd_energy: f64,
    pub vsd_energy: f64,
    pub sd_advertisements: u64,
    pub sd_discovery_replies: u64,
    pub vsd_advertisements: u64,
    pub vsd_discovery_replies: u64,
    pub cp_searches: u64,
    pub service_accesses: u64,
    pub throughput_bpms: Option<f64>,
}

/// Builds and runs one scenario.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunArtifact, ScenarioError> {
    cfg.validate()?;
    let mut net = SimNet::new(SimNetConfig {
        seed: cfg.seed,
        loss_rate: cfg.loss_rate,
        ..SimNetConfig::default()
    })
    .map_err(|e| ScenarioError::Config(e.to_string()))?;
    let boot = Duration::ZERO;
    let start = cfg.window_start();
    let end = cfg.window_end();

    let vsd = match cfg.scheme {
        Scheme::Vsdm => {
            let node = VsdNode::new(VsdConfig {
                advertisement_interval: Duration::from_secs(cfg.advertisement_interval_s),
                ..VsdConfig::default()
            })
            .map_err(|e| ScenarioError::Config(e.to_string()))?;
            Some(net.add_node("vsd", LinkClass::WIFI, true, Box::new(node), boot))
        }
        Scheme::Baseline => None,
    };
    let sd_opts = SdOptions {
        mode: match cfg.scheme {
            Scheme::Vsdm => EnrollMode::Auto,
            Scheme::Baseline => EnrollMode::Baseline,
        },
        advertisement_interval: Duration::from_secs(cfg.advertisement_interval_s),
        ..SdOptions::default()
    };
    let sd_cfg = SdConfig::demo("sd", cfg.services, cfg.services_matched.max(1));
    let sd_node = SdNode::new(sd_cfg, sd_opts).map_err(|e| ScenarioError::Config(e.to_string()))?;
    let sd = net.add_node("sd", cfg.class.link(), true, Box::new(sd_node), boot);

    let targeted = match cfg.workload {
        Workload::Throughput => {
            let mut args = Map::new();
            args.insert("in".into(), Value::from("ping"));
            let node = TargetedCp::new(
                DEMO_TYPE,
                "Echo",
                args,
                Duration::from_secs(cfg.control_interval_s),
            );
            Some(net.add_node("cp-target", LinkClass::WIFI, false, Box::new(node), start))
        }
        Workload::Energy => None,
    };
    let participants: Vec<DeviceId> = (0..cfg.n_cps)
        .map(|i| {
            let mut node = DiscoveryLoop::new(cfg.participant_st(), cfg.discovery_interval.interval());
            if cfg.fetch_descriptions {
                node = node.fetching_descriptions();
            }
            net.add_node(&format!("cp-{i}"), LinkClass::LLN, true, Box::new(node), start)
        })
        .collect();

    let everyone: Vec<DeviceId> = vsd
        .into_iter()
        .chain([sd])
        .chain(targeted)
        .chain(participants.iter().copied())
        .collect();
    for &dev in &everyone {
        net.schedule_stop(dev, end);
    }

    net.run_until(start);
    if cfg.scheme == Scheme::Vsdm {
        let node = net.node::<SdNode>(sd).expect("sd node");
        let all = SdConfig::demo("sd", cfg.services, 1)
            .services
            .iter()
            .all(|s| node.delegation(&s.name) == Some(Delegation::Delegated));
        if !all {
            return Err(ScenarioError::EnrollmentIncomplete);
        }
    }
    net.run_until(end + Duration::from_secs(cfg.drain_s));

    Ok(RunArtifact {
        config: cfg.clone(),
        roles: Roles {
            sd,
            vsd,
            targeted,
            participants,
        },
        log: net.take_log(),
    })
}

/// Runs a scenario and computes its report.
pub fn run(cfg: &ScenarioConfig) -> Result<(ScenarioReport, RunArtifact), ScenarioError> {
    let artifact = run_scenario(cfg)?;
    let report = report_from_log(&artifact)?;
    Ok((report, artifact))
}

fn counters_in_window(log: &[LogRecord], dev: DeviceId, from_ns: u64) -> DeviceCounters {
    let mut c = DeviceCounters::default();
    for rec in log {
        match *rec {
            LogRecord::Send { src, bytes, at_ns, recipients, .. } if src == dev && at_ns >= from_ns => {
                c.tx_bytes += bytes as u64;
                c.tx_msgs += 1;
                c.tx_fanout_bytes += (bytes * recipients) as u64;
            }
            LogRecord::Deliver { dst, bytes, at_ns, .. } if dst == dev && at_ns >= from_ns => {
                c.rx_bytes += bytes as u64;
                c.rx_msgs += 1;
            }
            _ => {}
        }
    }
    c
}

fn count_sends(log: &[LogRecord], devs: &[DeviceId], class: FrameClass, prefix: &str, from_ns: u64) -> u64 {
    log.iter()
        .filter(|r| match r {
            LogRecord::Send { src, class: c, summary, at_ns, .. } => {
                devs.contains(src) && *c == class && summary.starts_with(prefix) && *at_ns >= from_ns
            }
            _ => false,
        })
        .count() as u64
}

/// Service access requests (control or subscription) sent by `cp` and
/// delivered to `sd` at or after `from_ns`: `(bytes, delay ms)` pairs.
pub fn service_accesses(log: &[LogRecord], cp: DeviceId, sd: DeviceId, from_ns: u64) -> Vec<(usize, f64)> {
    let mut summaries: HashMap<u64, &str> = HashMap::new();
    for rec in log {
        if let LogRecord::Send { frame, src, class: FrameClass::Request, summary, .. } = rec {
            if *src == cp {
                summaries.insert(*frame, summary.as_str());
            }
        }
    }
    log.iter()
        .filter_map(|rec| match *rec {
            LogRecord::Deliver { frame, src, dst, class: FrameClass::Request, bytes, sent_ns, at_ns }
                if src == cp && dst == sd && sent_ns >= from_ns =>
            {
                let line = summaries.get(&frame)?;
                (line.starts_with("POST ") || line.starts_with("SUBSCRIBE "))
                    .then(|| (bytes, crate::netfab::sim::end_to_end_delay_ms(sent_ns, at_ns)))
            }
            _ => None,
        })
        .collect()
}

/// Bytes of service access received by the SD divided by the summed
/// end-to-end delays of those messages, in bytes per ms.
pub fn compute_throughput(log: &[LogRecord], targeted_cp: DeviceId, sd: DeviceId, from_ns: u64) -> Result<f64, ScenarioError> {
    throughput_of(&service_accesses(log, targeted_cp, sd, from_ns))
}

/// `Σ bytes / Σ delay` over `(bytes, delay ms)` samples.
pub fn throughput_of(samples: &[(usize, f64)]) -> Result<f64, ScenarioError> {
    let bytes: usize = samples.iter().map(|s| s.0).sum();
    let delay: f64 = samples.iter().map(|s| s.1).sum();
    if samples.is_empty() || delay <= 0.0 {
        return Err(ScenarioError::NoServiceAccess);
    }
    Ok(bytes as f64 / delay)
}

/// Computes the report of a finished run from its log.
pub fn report_from_log(artifact: &RunArtifact) -> Result<ScenarioReport, ScenarioError> {
    let cfg = &artifact.config;
    let roles = &artifact.roles;
    let log = &artifact.log;
    let from = cfg.window_start().as_nanos() as u64;
    let sd = counters_in_window(log, roles.sd, from);
    let vsd = roles
        .vsd
        .map(|v| counters_in_window(log, v, from))
        .unwrap_or_default();
    let vsd_devs: Vec<DeviceId> = roles.vsd.into_iter().collect();
    let (service_accesses_n, throughput) = match roles.targeted {
        Some(cp) => {
            let samples = service_accesses(log, cp, roles.sd, from);
            (samples.len() as u64, Some(throughput_of(&samples)?))
        }
        None => (0, None),
    };
    Ok(ScenarioReport {
        schema: REPORT_SCHEMA,
        scheme: cfg.scheme,
        class: cfg.class,
        n_cps: cfg.n_cps,
        discovery_interval: cfg.discovery_interval,
        rep: cfg.rep,
        seed: cfg.seed,
        sd_energy: sd.energy(cfg.beta_tx, cfg.beta_rx),
        vsd_energy: vsd.energy(cfg.beta_tx, cfg.beta_rx),
        sd,
        vsd,
        sd_advertisements: count_sends(log, &[roles.sd], FrameClass::Multicast, "NOTIFY", from),
        sd_discovery_replies: count_sends(log, &[roles.sd], FrameClass::Datagram, "HTTP/1.1 200", from),
        vsd_advertisements: count_sends(log, &vsd_devs, FrameClass::Multicast, "NOTIFY", from),
        vsd_discovery_replies: count_sends(log, &vsd_devs, FrameClass::Datagram, "HTTP/1.1 200", from),
        cp_searches: count_sends(log, &roles.participants, FrameClass::Multicast, "M-SEARCH", from),
        service_accesses: service_accesses_n,
        throughput_bpms: throughput,
    })
}

type RunResult = Result<(ScenarioReport, RunArtifact), ScenarioError>;

/// A grid of scenarios: every `(n_cps, interval)` pair, `reps` seeded
/// repetitions each, under both schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub base: ScenarioConfig,
    pub cps: Vec<usize>,
    pub intervals: Vec<DiscoveryInterval>,
    pub reps: u32,
    /// Repetition `r` uses seed `seed + r`.
    pub seed: u64,
}

impl Sweep {
    pub fn energy(cps: Vec<usize>, intervals: Vec<DiscoveryInterval>, reps: u32) -> Self {
        Sweep {
            base: ScenarioConfig::default(),
            cps,
            intervals,
            reps,
            seed: 0,
        }
    }

    /// Participants behave like ordinary control points: they search for
    /// every service and retrieve each description they discover, at
    /// [`DiscoveryInterval::jittered`] intervals around each mean in
    /// `periods_ms`.
    pub fn throughput(class: NetClass, cps: Vec<usize>, periods_ms: &[u64], reps: u32) -> Self {
        Sweep {
            base: ScenarioConfig {
                workload: Workload::Throughput,
                class,
                search_all: true,
                fetch_descriptions: true,
                ..ScenarioConfig::default()
            },
            cps,
            intervals: periods_ms.iter().map(|&t| DiscoveryInterval::jittered(t)).collect(),
            reps,
            seed: 0,
        }
    }

    /// Scenario configs in output order.
    pub fn configs(&self) -> Vec<ScenarioConfig> {
        let mut out = Vec::new();
        for &n_cps in &self.cps {
            for &interval in &self.intervals {
                for rep in 0..self.reps {
                    for scheme in [Scheme::Baseline, Scheme::Vsdm] {
                        out.push(ScenarioConfig {
                            scheme,
                            n_cps,
                            discovery_interval: interval,
                            rep,
                            seed: self.seed + u64::from(rep),
                            ..self.base.clone()
                        });
                    }
                }
            }
        }
        out
    }

    /// Runs every scenario, on up to `threads` threads. Output order does
    /// not depend on the thread count.
    pub fn run(&self, threads: usize) -> Result<Vec<(ScenarioReport, RunArtifact)>, ScenarioError> {
        let configs = self.configs();
        for c in &configs {
            c.validate()?;
        }
        let results: Vec<Mutex<Option<RunResult>>> =
            configs.iter().map(|_| Mutex::new(None)).collect();
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..threads.clamp(1, configs.len().max(1)) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(cfg) = configs.get(i) else { break };
                    *results[i].lock().expect("poisoned") = Some(run(cfg));
                });
            }
        });
        results
            .into_iter()
            .map(|m| m.into_inner().expect("poisoned").expect("every scenario ran"))
            .collect()
    }
}

pub fn default_threads() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn csv_row(r: &ScenarioReport) -> String {
    let throughput = r.throughput_bpms.map(|t| format!("{t:.6}")).unwrap_or_default();
    format!(
        "{},{},{},{},{},{},{},{},{}",
        r.scheme, r.class, r.n_cps, r.discovery_interval, r.rep, r.seed, r.sd_energy, r.vsd_energy, throughput
    )
}

pub fn to_csv(reports: &[ScenarioReport]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&csv_row(r));
        out.push('\n');
    }
    out
}

/// Mean metrics of both schemes at one sweep point.
#[derive(Debug, Clone, PartialEq)]
pub struct GainRow {
    pub class: NetClass,
    pub n_cps: usize,
    pub interval: DiscoveryInterval,
    pub baseline_sd_energy: f64,
    pub vsdm_sd_energy: f64,
    pub energy_gain: f64,
    pub percent_gain: f64,
    pub baseline_throughput: Option<f64>,
    pub vsdm_throughput: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Averages repetitions per `(class, n_cps, interval)` in first-seen order.
pub fn gain_table(reports: &[ScenarioReport]) -> Vec<GainRow> {
    let mut keys = Vec::new();
    for r in reports {
        let k = (r.class, r.n_cps, r.discovery_interval);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(class, n_cps, interval)| {
            let pick = |scheme| {
                reports.iter().filter(move |r| {
                    r.scheme == scheme && r.class == class && r.n_cps == n_cps && r.discovery_interval == interval
                })
            };
            let base = mean(pick(Scheme::Baseline).map(|r| r.sd_energy)).unwrap_or(0.0);
            let vsdm = mean(pick(Scheme::Vsdm).map(|r| r.sd_energy)).unwrap_or(0.0);
            GainRow {
                class,
                n_cps,
                interval,
                baseline_sd_energy: base,
                vsdm_sd_energy: vsdm,
                energy_gain: base - vsdm,
                percent_gain: if base > 0.0 { 100.0 * (base - vsdm) / base } else { 0.0 },
                baseline_throughput: mean(pick(Scheme::Baseline).filter_map(|r| r.throughput_bpms)),
                vsdm_throughput: mean(pick(Scheme::Vsdm).filter_map(|r| r.throughput_bpms)),
            }
        })
        .collect()
}

/// Column-aligned summary of a sweep.
pub fn to_text(reports: &[ScenarioReport]) -> String {
    let header = [
        "class", "n_cps", "interval_ms", "E_sd baseline", "E_sd vsdm", "gain", "gain %", "thr baseline",
        "thr vsdm",
    ];
    let opt = |v: Option<f64>| v.map(|t| format!("{t:.3}")).unwrap_or_else(|| "-".into());
    let rows: Vec<Vec<String>> = gain_table(reports)
        .iter()
        .map(|g| {
            vec![
                g.class.to_string(),
                g.n_cps.to_string(),
                g.interval.to_string(),
                format!("{:.1}", g.baseline_sd_energy),
                format!("{:.1}", g.vsdm_sd_energy),
                format!("{:.1}", g.energy_gain),
                format!("{:.1}", g.percent_gain),
                opt(g.baseline_throughput),
                opt(g.vsdm_throughput),
            ]
        })
        .collect();
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in &rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.len());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let padded: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect();
        let _ = writeln!(out, "{}", padded.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for row in &rows {
        line(row.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

/// Writes an artifact as JSON lines: the scenario and roles first, then
/// one log record per line.
pub fn save_artifact(artifact: &RunArtifact, out: &mut impl Write) -> std::io::Result<()> {
    let head = serde_json::json!({ "config": artifact.config, "roles": artifact.roles });
    writeln!(out, "{head}")?;
    for rec in &artifact.log {
        serde_json::to_writer(&mut *out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn load_artifact(input: impl BufRead) -> Result<RunArtifact, ScenarioError> {
    #[derive(Deserialize)]
    struct Head {
        config: ScenarioConfig,
        roles: Roles,
    }
    let bad = |e: &dyn fmt::Display| ScenarioError::Log(e.to_string());
    let mut lines = input.lines();
    let head = lines.next().ok_or_else(|| ScenarioError::Log("empty log".into()))?;
    let head: Head = serde_json::from_str(&head.map_err(|e| bad(&e))?).map_err(|e| bad(&e))?;
    let mut log = Vec::new();
    for line in lines {
        let line = line.map_err(|e| bad(&e))?;
        if line.trim().is_empty() {
            continue;
        }
        log.push(serde_json::from_str(&line).map_err(|e| bad(&e))?);
    }
    Ok(RunArtifact {
        config: head.config,
        roles: head.roles,
        log,
    })
}

/// Baseline SD discovery replies expected over the window.
pub fn expected_baseline_replies(cfg: &ScenarioConfig) -> Option<u64> {
    match cfg.discovery_interval {
        DiscoveryInterval::Fixed { ms } => {
            let per_cp = cfg.duration_s * 1000 / ms;
            Some(per_cp * cfg.n_cps as u64 * cfg.matching_services() as u64)
        }
        DiscoveryInterval::Random { .. } => None,
    }
}

/// Baseline SD advertisements expected over the window.
pub fn expected_baseline_advertisements(cfg: &ScenarioConfig) -> u64 {
    cfg.duration_s / cfg.advertisement_interval_s * cfg.services as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(scheme: Scheme, n_cps: usize, ms: u64) -> ScenarioConfig {
        ScenarioConfig {
            scheme,
            n_cps,
            discovery_interval: DiscoveryInterval::Fixed { ms },
            duration_s: 240,
            ..ScenarioConfig::default()
        }
    }

    #[test]
    fn throughput_arithmetic() {
        assert_eq!(throughput_of(&[(200, 20.0)]).unwrap(), 10.0);
        assert_eq!(throughput_of(&[(200, 20.0), (100, 30.0)]).unwrap(), 6.0);
        assert_eq!(throughput_of(&[]), Err(ScenarioError::NoServiceAccess));
    }

    #[test]
    fn interval_parsing() {
        assert_eq!(DiscoveryInterval::parse("1000"), Some(DiscoveryInterval::Fixed { ms: 1000 }));
        assert_eq!(
            DiscoveryInterval::parse("random[1000,3000]"),
            Some(DiscoveryInterval::Random { min_ms: 1000, max_ms: 3000 })
        );
        assert_eq!(DiscoveryInterval::parse("0"), None);
        assert_eq!(DiscoveryInterval::parse("random[3,1]"), None);
        let r = DiscoveryInterval::Random { min_ms: 1000, max_ms: 3000 };
        assert_eq!(DiscoveryInterval::parse(&r.to_string()), Some(r));
    }

    #[test]
    fn baseline_counts_match_closed_form() {
        let cfg = short(Scheme::Baseline, 2, 2000);
        let (r, _) = run(&cfg).unwrap();
        assert_eq!(r.sd_advertisements, expected_baseline_advertisements(&cfg));
        assert_eq!(Some(r.sd_discovery_replies), expected_baseline_replies(&cfg));
        assert_eq!(r.cp_searches, 240);
    }

    #[test]
    fn vsdm_moves_work_to_the_vsd() {
        let base = short(Scheme::Baseline, 2, 2000);
        let cfg = short(Scheme::Vsdm, 2, 2000);
        let (r, _) = run(&cfg).unwrap();
        assert_eq!((r.sd_advertisements, r.sd_discovery_replies), (0, 0));
        assert_eq!(r.vsd_advertisements, expected_baseline_advertisements(&base));
        assert_eq!(Some(r.vsd_discovery_replies), expected_baseline_replies(&base));
        assert_eq!(r.sd_energy, 0.0);
    }

    #[test]
    fn report_survives_a_log_roundtrip() {
        let cfg = ScenarioConfig {
            workload: Workload::Throughput,
            ..short(Scheme::Vsdm, 1, 1000)
        };
        let (report, artifact) = run(&cfg).unwrap();
        assert!(report.service_accesses > 0);
        let mut buf = Vec::new();
        save_artifact(&artifact, &mut buf).unwrap();
        let loaded = load_artifact(buf.as_slice()).unwrap();
        assert_eq!(loaded, artifact);
        assert_eq!(report_from_log(&loaded).unwrap(), report);
    }

    #[test]
    fn csv_has_one_row_per_run() {
        let sweep = Sweep {
            base: ScenarioConfig {
                duration_s: 120,
                ..ScenarioConfig::default()
            },
            ..Sweep::energy(vec![1, 2], vec![DiscoveryInterval::Fixed { ms: 1000 }], 2)
        };
        let runs = sweep.run(2).unwrap();
        let reports: Vec<_> = runs.into_iter().map(|r| r.0).collect();
        let csv = to_csv(&reports);
        assert_eq!(csv.lines().count(), 1 + 2 * 2 * 2);
        assert_eq!(csv.lines().next(), Some(CSV_HEADER));
        let text = to_text(&reports);
        assert_eq!(text.lines().count(), 3);
        let widths: Vec<usize> = text.lines().map(str::len).collect();
        assert!(widths.windows(2).all(|w| w[0] == w[1]), "{text}");
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            ScenarioConfig { duration_s: 0, ..ScenarioConfig::default() },
            ScenarioConfig { services_matched: 4, ..ScenarioConfig::default() },
            ScenarioConfig { discovery_interval: DiscoveryInterval::Fixed { ms: 0 }, ..ScenarioConfig::default() },
        ] {
            assert!(matches!(run_scenario(&cfg), Err(ScenarioError::Config(_))));
        }
    }
}
