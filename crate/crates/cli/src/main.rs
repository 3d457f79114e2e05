//! `vsdm`: run a VSD, a service device or a control point on real sockets,
//! or run the simulated experiments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use anyhow::{bail, Context as _, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;
use serde_json::{Map, Value};
use url::Url;

use vsdm::cp_client::ControlPoint;
use vsdm::expharness::{self, DiscoveryInterval, NetClass, ScenarioReport, Sweep};
use vsdm::netfab::real::{NetConfig, NodeHandle, UdpHttpClient};
use vsdm::netfab::Transport;
use vsdm::sd_agent::{EnrollMode, EventNotification, SdConfig, SdNode, SdOptions};
use vsdm::vsd_daemon::{VsdConfig, VsdNode};

#[derive(Parser)]
#[command(name = "vsdm", version, about = "Service discovery with delegation to a Virtual Service Device")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a Virtual Service Device.
    Vsd(VsdArgs),
    /// Run a service device hosting the services of a config file.
    Sd(SdArgs),
    /// Control point operations.
    #[command(subcommand)]
    Cp(CpCommand),
    /// Simulated experiments.
    #[command(subcommand)]
    Exp(ExpCommand),
}

#[derive(Args, Clone)]
struct NetArgs {
    /// Multicast group and port.
    #[arg(long, value_name = "ADDR")]
    mcast: Option<SocketAddrV4>,
    /// Interface address used for multicast and in advertised URLs.
    #[arg(long, value_name = "IP")]
    interface: Option<Ipv4Addr>,
    /// Timeout of a single HTTP exchange.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "5s")]
    timeout: Duration,
}

impl NetArgs {
    fn config(&self) -> NetConfig {
        let mut cfg = NetConfig::default();
        if let Some(group) = self.mcast {
            cfg.group = group;
        }
        if let Some(ip) = self.interface {
            cfg.interface = ip;
        }
        cfg.request_timeout = self.timeout;
        cfg
    }
}

#[derive(Args)]
struct VsdArgs {
    /// TOML file with any of `listen`, `mcast`, `adv_interval`, `id`;
    /// flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    listen: Option<SocketAddr>,
    #[arg(long, value_parser = humantime::parse_duration)]
    adv_interval: Option<Duration>,
    #[arg(long)]
    id: Option<String>,
    /// Exit after this long instead of running until interrupted.
    #[arg(long, value_parser = humantime::parse_duration)]
    run_for: Option<Duration>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct VsdFile {
    listen: Option<SocketAddr>,
    mcast: Option<SocketAddrV4>,
    adv_interval: Option<String>,
    id: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Auto,
    Baseline,
}

#[derive(Args)]
struct SdArgs {
    /// Service config file (TOML).
    #[arg(long)]
    services: PathBuf,
    #[arg(long, value_enum, default_value = "auto")]
    mode: ModeArg,
    #[arg(long, default_value = "0.0.0.0:0")]
    listen: SocketAddr,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "120s")]
    adv_interval: Duration,
    #[arg(long, value_parser = humantime::parse_duration)]
    run_for: Option<Duration>,
    #[command(flatten)]
    net: NetArgs,
}

#[derive(Subcommand)]
enum CpCommand {
    /// Search and print every answer.
    Discover {
        #[arg(long, default_value = "ssdp:all")]
        st: String,
        #[arg(long, value_parser = humantime::parse_duration, default_value = "2s")]
        wait: Duration,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Fetch and print a service description.
    Describe {
        location: Url,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Invoke an action of the service described at LOCATION.
    Invoke {
        location: Url,
        action: String,
        /// `name=value`; values that parse as JSON are sent as such,
        /// anything else as a string.
        #[arg(long = "arg", value_name = "NAME=VALUE")]
        args: Vec<String>,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Subscribe to the service described at LOCATION and print
    /// notifications.
    Subscribe {
        location: Url,
        #[arg(long = "for", value_parser = humantime::parse_duration, default_value = "30s")]
        listen_for: Duration,
        #[command(flatten)]
        net: NetArgs,
    },
    /// Search repeatedly.
    Loop {
        #[arg(long, default_value = "ssdp:all")]
        st: String,
        #[arg(long, value_parser = humantime::parse_duration, default_value = "2s")]
        interval: Duration,
        #[arg(long)]
        rounds: Option<usize>,
        #[command(flatten)]
        net: NetArgs,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OutFormat {
    Csv,
    Text,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
    cps: Vec<usize>,
    /// Discovery intervals in ms. Throughput runs treat each value as the
    /// mean of a uniform interval over [T/2, 3T/2].
    #[arg(long, value_delimiter = ',', default_value = "1000,2000,3000")]
    intervals: Vec<String>,
    #[arg(long, default_value_t = 10)]
    reps: u32,
    /// Seed of repetition 0; repetition r uses seed + r.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Measured window in seconds.
    #[arg(long, default_value_t = 1200)]
    duration: u64,
    #[arg(long, default_value_t = 120)]
    adv_interval: u64,
    #[arg(long, default_value_t = 3)]
    services: usize,
    #[arg(long, default_value_t = 1)]
    services_matched: usize,
    #[arg(long, default_value_t = 1.0)]
    beta_tx: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_rx: f64,
    #[arg(long, value_enum, default_value = "csv")]
    out: OutFormat,
    /// Write to this file instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Save one event log per run in this directory.
    #[arg(long)]
    save_logs: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum ExpCommand {
    /// Energy overhead of the SD under discovery load.
    Energy(SweepArgs),
    /// Service access throughput of a targeted control point.
    Throughput {
        #[arg(long, value_enum, default_value = "lln")]
        class: ClassArg,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Recompute reports from saved event logs.
    Replay {
        logs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "csv")]
        out: OutFormat,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ClassArg {
    Lln,
    Wifi,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("VSDM_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Vsd(args) => run_vsd(args),
        Command::Sd(args) => run_sd(args),
        Command::Cp(cmd) => run_cp(cmd),
        Command::Exp(cmd) => run_exp(cmd),
    }
}

fn wait(run_for: Option<Duration>) {
    match run_for {
        Some(d) => std::thread::sleep(d),
        None => loop {
            std::thread::park();
        },
    }
}

fn run_vsd(args: VsdArgs) -> Result<()> {
    let file: VsdFile = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => VsdFile::default(),
    };
    let mut cfg = VsdConfig::default();
    let mut net = args.net.config();
    if let Some(listen) = args.listen.or(file.listen) {
        cfg.listen = listen;
    }
    if let Some(group) = args.net.mcast.or(file.mcast) {
        cfg.group = group;
        net.group = group;
    }
    if let Some(d) = args.adv_interval {
        cfg.advertisement_interval = d;
    } else if let Some(d) = &file.adv_interval {
        cfg.advertisement_interval = humantime::parse_duration(d).context("adv_interval")?;
    }
    if let Some(id) = args.id.or(file.id) {
        cfg.vsd_id = id;
    }
    let listen = cfg.listen;
    let node = VsdNode::new(cfg)?;
    let handle = NodeHandle::spawn(node, net, listen).context("starting VSD")?;
    println!("vsd listening on {}", handle.base_url());
    println!("agent description {}", handle.base_url().join(vsdm::vsd_daemon::AGENT_DESCRIPTION_PATH)?);
    std::io::stdout().flush()?;
    wait(args.run_for);
    handle.shutdown();
    Ok(())
}

fn run_sd(args: SdArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.services)
        .with_context(|| format!("reading {}", args.services.display()))?;
    let cfg = SdConfig::from_toml_str(&text)?;
    let opts = SdOptions {
        mode: match args.mode {
            ModeArg::Auto => EnrollMode::Auto,
            ModeArg::Baseline => EnrollMode::Baseline,
        },
        advertisement_interval: args.adv_interval,
        ..SdOptions::default()
    };
    let node = SdNode::new(cfg, opts)?;
    let handle = NodeHandle::spawn(node, args.net.config(), args.listen).context("starting SD")?;
    println!("sd listening on {}", handle.base_url());
    if let Some(infos) = handle.invoke(|n, _| n.service_infos()) {
        for info in infos {
            println!("service {} {} {}", info.service_name, info.service_type, info.description_location_url);
        }
    }
    std::io::stdout().flush()?;
    wait(args.run_for);
    handle.invoke(|n, cx| n.announce_departure(cx));
    handle.shutdown();
    Ok(())
}

fn parse_args(pairs: &[String]) -> Result<Map<String, Value>> {
    let mut out = Map::new();
    for pair in pairs {
        let Some((name, value)) = pair.split_once('=') else {
            bail!("argument {pair:?} is not NAME=VALUE");
        };
        let value = serde_json::from_str(value).unwrap_or_else(|_| Value::String(value.to_string()));
        out.insert(name.to_string(), value);
    }
    Ok(out)
}

fn run_cp(cmd: CpCommand) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match cmd {
        CpCommand::Discover { st, wait, net } => {
            let mut client = UdpHttpClient::new(net.config());
            let found = ControlPoint::new(&mut client).discover(&st, wait)?;
            for d in &found {
                writeln!(out, "location={} usn={} st={} from={}", d.location, d.usn, d.search_target, d.from)?;
            }
            writeln!(out, "found={}", found.len())?;
        }
        CpCommand::Describe { location, net } => {
            let mut client = UdpHttpClient::new(net.config());
            let doc = ControlPoint::new(&mut client).describe(&location)?;
            writeln!(out, "name={}", doc.service_name)?;
            writeln!(out, "type={}", doc.service_type)?;
            writeln!(out, "control={}", location.join(&doc.control_url)?)?;
            writeln!(out, "events={}", location.join(&doc.event_url)?)?;
            for action in &doc.actions {
                let args: Vec<String> = action
                    .arguments
                    .iter()
                    .map(|a| format!("{}:{:?}:{:?}", a.name, a.direction, a.type_tag).to_lowercase())
                    .collect();
                writeln!(out, "action={} args={}", action.name, args.join(","))?;
            }
            for v in &doc.state_variables {
                writeln!(out, "variable={} type={} evented={}", v.name, format!("{:?}", v.type_tag).to_lowercase(), v.evented)?;
            }
        }
        CpCommand::Invoke { location, action, args, net } => {
            let args = parse_args(&args)?;
            let mut client = UdpHttpClient::new(net.config());
            let mut cp = ControlPoint::new(&mut client);
            let doc = cp.describe(&location)?;
            let outputs = cp.invoke_action(&location, &doc, &action, args)?;
            for (name, value) in &outputs {
                writeln!(out, "{name}={value}")?;
            }
        }
        CpCommand::Subscribe { location, listen_for, net } => {
            let mut client = UdpHttpClient::new(net.config());
            let callback = client.callback_url()?;
            let mut cp = ControlPoint::new(&mut client);
            let doc = cp.describe(&location)?;
            let sid = cp.subscribe(&location, &doc, &callback)?;
            writeln!(out, "sid={sid}")?;
            out.flush()?;
            let deadline = Instant::now() + listen_for;
            while Instant::now() < deadline {
                for note in client.take_notifications() {
                    match serde_json::from_slice::<EventNotification>(&note.body) {
                        Ok(n) => {
                            let changes: Vec<String> = n.changes.iter().map(|(k, v)| format!("{k}={v}")).collect();
                            writeln!(out, "event seq={} {}", n.seq, changes.join(" "))?;
                        }
                        Err(e) => log::warn!("unreadable notification: {e}"),
                    }
                    out.flush()?;
                }
                std::thread::sleep(Duration::from_millis(50));
            }
        }
        CpCommand::Loop { st, interval, rounds, net } => {
            let mut client = UdpHttpClient::new(net.config());
            let mut cp = ControlPoint::new(&mut client);
            let mut failed = None;
            cp.discovery_loop(&st, interval, rounds, |round, found| {
                let line = found.iter().map(|d| d.location.as_str()).collect::<Vec<_>>().join(" ");
                match writeln!(out, "round={round} found={} {line}", found.len()).and_then(|_| out.flush()) {
                    Ok(()) => true,
                    Err(e) => {
                        failed = Some(e);
                        false
                    }
                }
            })?;
            if let Some(e) = failed {
                return Err(e.into());
            }
        }
    }
    Ok(())
}

fn parse_intervals(values: &[String]) -> Result<Vec<DiscoveryInterval>> {
    values
        .iter()
        .map(|v| DiscoveryInterval::parse(v).with_context(|| format!("bad interval {v:?}")))
        .collect()
}

fn fixed_periods(values: &[String]) -> Result<Vec<u64>> {
    values
        .iter()
        .map(|v| match v.parse::<u64>() {
            Ok(ms) if ms > 0 => Ok(ms),
            _ => bail!("bad interval {v:?}: throughput sweeps take mean intervals in ms"),
        })
        .collect()
}

fn apply(sweep: &mut Sweep, args: &SweepArgs) {
    sweep.seed = args.seed;
    let base = &mut sweep.base;
    base.duration_s = args.duration;
    base.advertisement_interval_s = args.adv_interval;
    base.services = args.services;
    base.services_matched = args.services_matched;
    base.beta_tx = args.beta_tx;
    base.beta_rx = args.beta_rx;
}

fn execute(sweep: Sweep, args: &SweepArgs) -> Result<()> {
    let threads = args.threads.unwrap_or_else(expharness::default_threads);
    let runs = sweep.run(threads)?;
    if let Some(dir) = &args.save_logs {
        std::fs::create_dir_all(dir)?;
        for (report, artifact) in &runs {
            let name = format!(
                "{}-{}-n{}-t{}-r{}.jsonl",
                report.scheme,
                report.class,
                report.n_cps,
                report.discovery_interval.to_string().replace(['[', ']'], ""),
                report.rep
            );
            let mut file = BufWriter::new(File::create(dir.join(name))?);
            expharness::save_artifact(artifact, &mut file)?;
            file.flush()?;
        }
    }
    let reports: Vec<ScenarioReport> = runs.into_iter().map(|r| r.0).collect();
    emit(&reports, args.out, args.output.as_deref())
}

fn emit(reports: &[ScenarioReport], format: OutFormat, output: Option<&Path>) -> Result<()> {
    let text = match format {
        OutFormat::Csv => expharness::to_csv(reports),
        OutFormat::Text => expharness::to_text(reports),
    };
    match output {
        Some(path) => std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?,
        None => std::io::stdout().lock().write_all(text.as_bytes())?,
    }
    Ok(())
}

fn run_exp(cmd: ExpCommand) -> Result<()> {
    match cmd {
        ExpCommand::Energy(args) => {
            let mut sweep = Sweep::energy(args.cps.clone(), parse_intervals(&args.intervals)?, args.reps);
            apply(&mut sweep, &args);
            execute(sweep, &args)
        }
        ExpCommand::Throughput { class, sweep: args } => {
            let class = match class {
                ClassArg::Lln => NetClass::Lln,
                ClassArg::Wifi => NetClass::Wifi,
            };
            let mut sweep = Sweep::throughput(class, args.cps.clone(), &fixed_periods(&args.intervals)?, args.reps);
            apply(&mut sweep, &args);
            execute(sweep, &args)
        }
        ExpCommand::Replay { logs, out, output } => {
            let mut reports = Vec::new();
            for path in &logs {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let artifact = expharness::load_artifact(BufReader::new(file))?;
                reports.push(expharness::report_from_log(&artifact)?);
            }
            emit(&reports, out, output.as_deref())
        }
    }
}
