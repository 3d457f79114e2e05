//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Map, Value};
use url::Url;

use vsdm::cp_client::{collect_responses, search_payload, ControlPoint};
use vsdm::expharness::{
    self, run, to_csv, DiscoveryInterval, NetClass, ScenarioConfig, ScenarioReport, Scheme, Sweep,
};
use vsdm::http::HttpRequest;
use vsdm::netfab::sim::{SimNet, SimNetConfig};
use vsdm::netfab::{socket_addr_of, LinkClass, Transport};
use vsdm::sd_agent::{Delegation, EnrollMode, SdConfig, SdNode, SdOptions};
use vsdm::service_registry::{bucket_of, Owner, ServiceKey, ServiceMap, ServiceMapEntry};
use vsdm::ssdp::{parse_message, serialize_message, MessageKind, SsdpMessage, SSDP_ALL};
use vsdm::vsd_daemon::{VsdConfig, VsdNode};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! check {
    ($cond:expr, $($msg:tt)+) => {
        let ok: bool = $cond;
        if !ok {
            return Err(format!($($msg)+));
        }
    };
}

const SEEDS: u64 = 10;
const CPS: [usize; 3] = [1, 2, 4];
const PERIODS: [u64; 3] = [1000, 2000, 3000];

fn threads() -> usize {
    expharness::default_threads()
}

// 1. Message counts against the closed form.
fn message_counts() -> Outcome {
    let mut slowest = Duration::ZERO;
    for n in CPS {
        for t in PERIODS {
            let started = Instant::now();
            let base = ScenarioConfig {
                n_cps: n,
                discovery_interval: DiscoveryInterval::Fixed { ms: t },
                ..ScenarioConfig::default()
            };
            let vsdm_cfg = ScenarioConfig {
                scheme: Scheme::Vsdm,
                ..base.clone()
            };
            let (b, _) = run(&base).map_err(|e| e.to_string())?;
            let (v, _) = run(&vsdm_cfg).map_err(|e| e.to_string())?;
            slowest = slowest.max(started.elapsed());
            let replies = n as u64 * (1_200_000 / t);
            check!(b.sd_advertisements == 10 * 3, "n={n} T={t}: baseline adverts {}", b.sd_advertisements);
            check!(b.sd_discovery_replies == replies, "n={n} T={t}: baseline replies {} != {replies}", b.sd_discovery_replies);
            check!(v.sd_advertisements == 0 && v.sd_discovery_replies == 0, "n={n} T={t}: VSDM SD sent {} adverts, {} replies", v.sd_advertisements, v.sd_discovery_replies);
            check!(v.vsd_discovery_replies == replies, "n={n} T={t}: VSD replies {} != {replies}", v.vsd_discovery_replies);
            check!(started.elapsed() < Duration::from_secs(10), "n={n} T={t}: took {:?}", started.elapsed());
        }
    }
    Ok(format!("9 sweep points exact, slowest {:.2}s", slowest.as_secs_f64()))
}

fn gains(reports: &[ScenarioReport]) -> BTreeMap<(usize, DiscoveryInterval, u32), f64> {
    let mut base = BTreeMap::new();
    let mut out = BTreeMap::new();
    for r in reports {
        let key = (r.n_cps, r.discovery_interval, r.rep);
        match r.scheme {
            Scheme::Baseline => {
                base.insert(key, r.sd_energy);
            }
            Scheme::Vsdm => {
                out.insert(key, base[&key] - r.sd_energy);
            }
        }
    }
    out
}

// 2. Energy gain grows with the number of control points and shrinks
// with the discovery interval.
fn energy_trend() -> Outcome {
    let intervals = PERIODS.iter().map(|&ms| DiscoveryInterval::Fixed { ms }).collect();
    let sweep = Sweep::energy(CPS.to_vec(), intervals, SEEDS as u32);
    let runs = sweep.run(threads()).map_err(|e| e.to_string())?;
    let reports: Vec<_> = runs.into_iter().map(|r| r.0).collect();
    let g = gains(&reports);
    let t1 = DiscoveryInterval::Fixed { ms: 1000 };
    let t3 = DiscoveryInterval::Fixed { ms: 3000 };
    for rep in 0..SEEDS as u32 {
        let (g1, g2, g4) = (g[&(1, t1, rep)], g[&(2, t1, rep)], g[&(4, t1, rep)]);
        check!(g1 < g2 && g2 < g4, "seed {rep}: gains {g1} {g2} {g4} not increasing in n_cps");
        check!(g[&(2, t1, rep)] > g[&(2, t3, rep)], "seed {rep}: gain at 1000 ms not above 3000 ms");
    }
    let (g1, g2, g4) = (g[&(1, t1, 0)], g[&(2, t1, 0)], g[&(4, t1, 0)]);
    Ok(format!("{SEEDS} seeds, seed 0 gains at 1000 ms: {g1} < {g2} < {g4} bytes"))
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / n;
    let my = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

// 3. Throughput of the targeted control point.
fn throughput_dominance() -> Outcome {
    let mut summary = Vec::new();
    for class in [NetClass::Lln, NetClass::Wifi] {
        let sweep = Sweep::throughput(class, vec![0, 1, 2, 4], &PERIODS, SEEDS as u32);
        let runs = sweep.run(threads()).map_err(|e| e.to_string())?;
        let mut thr: BTreeMap<(Scheme, usize, u64, u32), f64> = BTreeMap::new();
        for (r, _) in &runs {
            let DiscoveryInterval::Random { min_ms, max_ms } = r.discovery_interval else {
                return Err("throughput sweep used a fixed interval".into());
            };
            let t = (min_ms + max_ms) / 2;
            let value = r.throughput_bpms.ok_or("missing throughput")?;
            thr.insert((r.scheme, r.n_cps, t, r.rep), value);
        }
        let mut worst_margin = f64::MAX;
        for n in [0usize, 1, 2, 4] {
            for rep in 0..SEEDS as u32 {
                let mut base_pts = Vec::new();
                let mut vsdm_pts = Vec::new();
                for t in PERIODS {
                    let b = thr[&(Scheme::Baseline, n, t, rep)];
                    let v = thr[&(Scheme::Vsdm, n, t, rep)];
                    check!(v >= b, "{class} n={n} T={t} seed {rep}: VSDM {v} < baseline {b}");
                    if n >= 2 {
                        check!(v > b, "{class} n={n} T={t} seed {rep}: VSDM {v} not above baseline {b}");
                        worst_margin = worst_margin.min(v - b);
                    }
                    base_pts.push((t as f64, b));
                    vsdm_pts.push((t as f64, v));
                }
                if n >= 1 {
                    let (sb, sv) = (slope(&base_pts), slope(&vsdm_pts));
                    check!(sv.abs() <= sb.abs(), "{class} n={n} seed {rep}: VSDM slope {sv} steeper than {sb}");
                    if n >= 2 {
                        check!(sv.abs() < sb.abs(), "{class} n={n} seed {rep}: VSDM slope {sv} not shallower than {sb}");
                    }
                }
            }
        }
        summary.push(format!("{class} min margin {worst_margin:.3} B/ms"));
    }
    Ok(format!("{SEEDS} seeds x 4 n_cps x 3 T, {}", summary.join(", ")))
}

fn sim_topology(mode: EnrollMode) -> (SimNet, usize, Option<usize>, usize) {
    let mut net = SimNet::new(SimNetConfig::default()).unwrap();
    let vsd = (mode == EnrollMode::Auto).then(|| {
        let node = VsdNode::new(VsdConfig::default()).unwrap();
        net.add_node("vsd", LinkClass::WIFI, true, Box::new(node), Duration::ZERO)
    });
    let opts = SdOptions {
        mode,
        ..SdOptions::default()
    };
    let sd = SdNode::new(SdConfig::demo("fixture", 3, 0), opts).unwrap();
    let sd = net.add_node("sd", LinkClass::LLN, true, Box::new(sd), Duration::ZERO);
    let cp = net.add_device("cp", LinkClass::WIFI, true);
    net.run_until(Duration::from_secs(10));
    (net, sd, vsd, cp)
}

fn calls() -> Vec<(usize, &'static str, Map<String, Value>)> {
    let mut out = Vec::new();
    for service in 0..3 {
        for text in ["", "hello", "ünïcode", "with spaces"] {
            out.push((service, "Echo", json!({ "in": text }).as_object().unwrap().clone()));
        }
        for level in [5, -3, 5, 0, i64::MAX] {
            out.push((service, "SetLevel", json!({ "value": level }).as_object().unwrap().clone()));
        }
    }
    out
}

fn invoke_all(mode: EnrollMode) -> Result<Vec<Map<String, Value>>, String> {
    let (mut net, _, _, cp) = sim_topology(mode);
    let mut client = net.client(cp);
    let mut cp = ControlPoint::new(&mut client);
    let mut located = Vec::new();
    for i in 0..3 {
        let st = format!("urn:demo:service:Sensor{i}:1");
        let found = cp.discover(&st, Duration::from_secs(1)).map_err(|e| e.to_string())?;
        let loc = found.first().ok_or(format!("{st} not found"))?.location.clone();
        let doc = cp.describe(&loc).map_err(|e| e.to_string())?;
        located.push((loc, doc));
    }
    calls()
        .into_iter()
        .map(|(i, action, args)| {
            let (loc, doc) = &located[i];
            cp.invoke_action(loc, doc, action, args).map_err(|e| e.to_string())
        })
        .collect()
}

// 4. Delegated and direct paths give the same answers.
fn behavioral_equivalence() -> Outcome {
    let direct = invoke_all(EnrollMode::Baseline)?;
    let delegated = invoke_all(EnrollMode::Auto)?;
    check!(direct.len() == 27, "expected 27 invocations");
    for (i, (a, b)) in direct.iter().zip(&delegated).enumerate() {
        check!(a == b, "call {i}: direct {a:?} != delegated {b:?}");
    }
    Ok(format!("{} invocations over 3 services x 2 actions identical", direct.len()))
}

// 5. What the VSD serves matches the SD, and only one device answers.
fn delegation_fidelity() -> Outcome {
    let (mut net, sd, _, cp) = sim_topology(EnrollMode::Auto);
    let infos = net.node::<SdNode>(sd).unwrap().service_infos();
    for (i, info) in infos.iter().enumerate() {
        let node = net.node::<SdNode>(sd).unwrap();
        check!(node.delegation(&info.service_name) == Some(Delegation::Delegated), "{} not delegated", info.service_name);
        let original = node.description_bytes(&info.service_name).unwrap().to_vec();
        let st = format!("urn:demo:service:Sensor{i}:1");
        let mut client = net.client(cp);
        let mut cpc = ControlPoint::new(&mut client);
        let found = cpc.discover(&st, Duration::from_secs(1)).map_err(|e| e.to_string())?;
        check!(found.len() == 1, "{st}: {} answers", found.len());
        let loc = found[0].location.clone();
        let served = cpc.describe_bytes(&loc).map_err(|e| e.to_string())?;
        check!(served == original, "{st}: served description differs from the original");
        let doc = cpc.describe(&loc).map_err(|e| e.to_string())?;
        let vsd_addr = socket_addr_of(&loc).map_err(|e| e.to_string())?;
        let expect_control = Url::parse(&info.description_location_url).unwrap().join(&info.control_url).unwrap();
        let expect_events = Url::parse(&info.description_location_url).unwrap().join(&info.event_url).unwrap();
        for (rel, method, expected) in [(&doc.control_url, "POST", expect_control), (&doc.event_url, "SUBSCRIBE", expect_events)] {
            let target = loc.join(rel).unwrap();
            let resp = client.request(vsd_addr, HttpRequest::new(method, target.path())).map_err(|e| e.to_string())?;
            check!(resp.status == 302, "{st}: {method} got {}", resp.status);
            check!(resp.header("LOCATION") == Some(expected.as_str()), "{st}: LOCATION {:?} != {expected}", resp.header("LOCATION"));
        }
    }

    // Watch searches across enrollment: at most one source per search.
    let mut net = SimNet::new(SimNetConfig::default()).unwrap();
    let watcher = net.add_device("cp", LinkClass::WIFI, true);
    let v = net.add_node("vsd", LinkClass::WIFI, true, Box::new(VsdNode::new(VsdConfig::default()).unwrap()), Duration::ZERO);
    let s = net.add_node(
        "sd",
        LinkClass::LLN,
        true,
        Box::new(SdNode::new(SdConfig::demo("fixture", 3, 0), SdOptions::default()).unwrap()),
        Duration::ZERO,
    );
    let mut searches = 0;
    let mut answered_by_vsd = 0;
    while net.now() < Duration::from_secs(20) {
        for st in ["urn:demo:service:Sensor1:1", SSDP_ALL] {
            let datagrams = net.client(watcher).search(&search_payload(st), Duration::from_millis(150)).map_err(|e| e.to_string())?;
            let found = collect_responses(st, &datagrams);
            let sources: BTreeSet<SocketAddr> = found.iter().map(|d| d.from).collect();
            check!(sources.len() <= 1, "t={:?} {st}: {} reply sources", net.now(), sources.len());
            searches += 1;
            if sources.contains(&net.datagram_addr(v)) {
                answered_by_vsd += 1;
            }
        }
    }
    let sd_replies = net.node::<SdNode>(s).unwrap().stats().discovery_replies;
    let vsd_replies = net.node::<VsdNode>(v).unwrap().stats().discovery_replies;
    check!(answered_by_vsd >= searches - 4, "VSD answered only {answered_by_vsd} of {searches} searches");
    check!(sd_replies + vsd_replies > 0 && sd_replies <= 4, "SD sent {sd_replies} replies");
    Ok(format!("3 services byte-identical with exact 302 targets; {searches} searches, at most one source each"))
}

fn colliding(n: usize) -> Vec<String> {
    let target = bucket_of("c-0", "t:0");
    (0..).map(|i| format!("c-{i}")).filter(|s| bucket_of(s, "t:0") == target).take(n).collect()
}

// 6. ServiceMap against an association list.
fn service_map_oracle() -> Outcome {
    let mut keys: Vec<ServiceKey> = colliding(8).iter().map(|n| ServiceKey::new(n, "t:0")).collect();
    for name in ["x", "y", "c-0"] {
        keys.push(ServiceKey::new(name, "t:1"));
    }
    keys.push(ServiceKey::new("x", "t:0"));
    let entry = |k: &ServiceKey, tag: u32| {
        let u = Url::parse(&format!("http://10.0.0.7/{tag}")).unwrap();
        ServiceMapEntry {
            key: k.clone(),
            delegated_location: u.clone(),
            control_url: u.clone(),
            event_url: u,
            owner: Owner { id: "o".into(), addr: IpAddr::V4(Ipv4Addr::new(10, 0, 0, 7)) },
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut map = ServiceMap::new();
    let mut list: Vec<ServiceMapEntry> = Vec::new();
    let ops = 20_000;
    for i in 0..ops {
        let k = &keys[rng.gen_range(0..keys.len())];
        match rng.gen_range(0..3) {
            0 => {
                let e = entry(k, i);
                let expected = match list.iter_mut().find(|x| x.key == *k) {
                    Some(slot) => Some(std::mem::replace(slot, e.clone())),
                    None => {
                        list.push(e.clone());
                        None
                    }
                };
                check!(map.insert(e) == expected, "op {i}: insert mismatch");
            }
            1 => {
                let expected = list.iter().position(|x| x.key == *k).map(|p| list.remove(p));
                check!(map.remove(k) == expected, "op {i}: remove mismatch");
            }
            _ => {
                let typed = rng.gen_bool(0.5);
                let ty = typed.then_some(k.service_type.as_str());
                let expected = list.iter().find(|x| x.key.name == k.name && ty.is_none_or(|t| x.key.service_type == t));
                check!(map.lookup(&k.name, ty) == expected, "op {i}: lookup mismatch");
            }
        }
        check!(map.len() == list.len(), "op {i}: size {} != {}", map.len(), list.len());
    }
    check!(map.iter().eq(list.iter()), "final iteration order differs");
    map.check_invariants()?;
    let longest = map.chain_lengths().into_iter().max().unwrap_or(0);
    Ok(format!("{ops} ops equal, longest chain {longest}"))
}

fn random_token(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..10);
    (0..len).map(|_| (b'A' + rng.gen_range(0..26)) as char).collect()
}

fn random_value(rng: &mut ChaCha8Rng) -> String {
    let len = rng.gen_range(1..40);
    let mut s: String = (0..len).map(|_| rng.gen_range(0x21u8..0x7f) as char).collect();
    if len > 2 {
        s.replace_range(1..2, " ");
    }
    s
}

fn random_message(rng: &mut ChaCha8Rng) -> SsdpMessage {
    let kind = [MessageKind::MSearch, MessageKind::Notify, MessageKind::SearchResponse][rng.gen_range(0..3)];
    let target = if kind == MessageKind::Notify { "NT" } else { "ST" };
    let extra = (0..rng.gen_range(0..4))
        .map(|_| (random_token(rng), random_value(rng)))
        .filter(|(n, _)| !["HOST", "LOCATION", "USN", "CACHE-CONTROL", target].contains(&n.as_str()))
        .collect();
    let (location, usn) = match kind {
        MessageKind::MSearch => (None, None),
        _ => (Some(random_value(rng)), Some(random_value(rng))),
    };
    SsdpMessage {
        kind,
        host: if kind == MessageKind::SearchResponse { String::new() } else { random_value(rng) },
        search_target: random_value(rng),
        location,
        usn,
        cache_control_max_age: rng.gen_bool(0.7).then(|| rng.gen_range(1..100_000)),
        extra_headers: extra,
    }
}

// 7. Codec roundtrip and totality.
fn codec_totality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut corpus = Vec::new();
    for i in 0..10_000 {
        let msg = random_message(&mut rng);
        let bytes = serialize_message(&msg).map_err(|e| format!("message {i}: {e}"))?;
        let back = parse_message(&bytes).map_err(|e| format!("message {i}: {e}"))?;
        check!(back == msg, "message {i} changed in a roundtrip");
        corpus.push(bytes);
    }
    let mut errors = 0usize;
    let fuzz = 100_000;
    for i in 0..fuzz {
        let input: Vec<u8> = if i % 2 == 0 {
            let len = rng.gen_range(0..2200);
            (0..len).map(|_| rng.gen()).collect()
        } else {
            let mut b = corpus[rng.gen_range(0..corpus.len())].clone();
            for _ in 0..rng.gen_range(1..6) {
                let at = rng.gen_range(0..b.len());
                match rng.gen_range(0..3) {
                    0 => b[at] = rng.gen(),
                    1 => {
                        b.remove(at);
                    }
                    _ => b.truncate(at),
                }
                if b.is_empty() {
                    break;
                }
            }
            b
        };
        match catch_unwind(|| parse_message(&input)) {
            Ok(Err(_)) => errors += 1,
            Ok(Ok(_)) => {}
            Err(_) => return Err(format!("parser panicked on fuzz input {i}")),
        }
    }
    Ok(format!("10000 roundtrips, {fuzz} fuzz inputs without panic ({errors} typed errors)"))
}

// 8. Same scenario and seed, same CSV.
fn determinism() -> Outcome {
    let energy = || Sweep::energy(vec![1, 2], vec![DiscoveryInterval::Fixed { ms: 1000 }, DiscoveryInterval::Random { min_ms: 1000, max_ms: 3000 }], 2);
    let thr = || Sweep::throughput(NetClass::Wifi, vec![2], &[1000], 2);
    let mut bytes = 0;
    for make in [&energy as &dyn Fn() -> Sweep, &thr] {
        let csv = |threads| -> Result<String, String> {
            let runs = make().run(threads).map_err(|e| e.to_string())?;
            Ok(to_csv(&runs.into_iter().map(|r| r.0).collect::<Vec<_>>()))
        };
        let (a, b) = (csv(1)?, csv(threads())?);
        check!(a == b, "CSV differs between runs");
        let replayed = {
            let runs = make().run(threads()).map_err(|e| e.to_string())?;
            let mut reports = Vec::new();
            for (_, artifact) in runs {
                let mut buf = Vec::new();
                expharness::save_artifact(&artifact, &mut buf).map_err(|e| e.to_string())?;
                let loaded = expharness::load_artifact(buf.as_slice()).map_err(|e| e.to_string())?;
                reports.push(expharness::report_from_log(&loaded).map_err(|e| e.to_string())?);
            }
            to_csv(&reports)
        };
        check!(a == replayed, "CSV from saved logs differs");
        bytes += a.len();
    }
    Ok(format!("energy and throughput CSVs byte-identical across runs and replay ({bytes} bytes)"))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("message-count exactness", message_counts),
        ("energy-gain trend", energy_trend),
        ("throughput dominance", throughput_dominance),
        ("end-to-end behavioral equivalence", behavioral_equivalence),
        ("delegation fidelity", delegation_fidelity),
        ("service map oracle", service_map_oracle),
        ("codec totality and roundtrip", codec_totality),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str()) || id.ends_with(p.as_str())) {
            continue;
        }
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
