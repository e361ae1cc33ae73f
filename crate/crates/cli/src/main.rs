//! `turngate`: run scenarios through the simulator, stand up live gateway and
//! node processes, drive traffic at them, and compare the resulting reports.
//!
//! Exit codes are part of the contract: 0 success, 2 bad input or config,
//! 3 runtime failure, 4 listen port already in use, 5 assertion failed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, Write as _};
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use turngate_core::metrics::{self, CompareTable, MetricsError, RunReport};
use turngate_core::net::{driver, gateway, node, NetError};
use turngate_core::ring::SessionId;
use turngate_core::scenario::Scenario;
use turngate_core::sim;
use turngate_core::trace;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;
const EXIT_PORT: u8 = 4;
const EXIT_ASSERT: u8 = 5;

#[derive(Parser)]
#[command(
    name = "turngate",
    version,
    about = "Session-sticky inference gateway: simulator, live harness, and report tools"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a scenario through the discrete-event simulator
    Simulate(SimulateArgs),
    /// Re-run a saved turn trace through the simulator
    Replay(ReplayArgs),
    /// Generate a scenario's turn trace and save it
    Trace(TraceArgs),
    /// Compare two saved run reports metric by metric
    Diff(DiffArgs),
    /// Ring layout tools
    #[command(subcommand)]
    Ring(RingCmd),
    /// Run one live component in the foreground until killed
    #[command(subcommand)]
    Serve(ServeCmd),
    /// Drive a live cluster with a scenario's trace and report the results
    Drive(DriveArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Structured,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct OutputArgs {
    /// Stdout format for the report
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Write the JSON report to this path
    #[arg(long, value_name = "PATH")]
    out: Option<PathBuf>,
    /// Check "metric op value" against the report; repeatable
    #[arg(long = "assert", value_name = "EXPR")]
    asserts: Vec<String>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// Override the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
    /// Force active health probing on or off
    #[arg(long, value_enum, value_name = "on|off")]
    health_checks: Option<Toggle>,
    /// Write the event log (one line per event) to this path
    #[arg(long, value_name = "PATH")]
    events: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct ReplayArgs {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// Saved trace to feed into the run
    trace: PathBuf,
    /// Override the scenario's seed (affects service-time sampling, not arrivals)
    #[arg(long)]
    seed: Option<u64>,
    /// Force active health probing on or off
    #[arg(long, value_enum, value_name = "on|off")]
    health_checks: Option<Toggle>,
    /// Write the event log to this path
    #[arg(long, value_name = "PATH")]
    events: Option<PathBuf>,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Args)]
struct TraceArgs {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// Where to save the trace
    #[arg(long, value_name = "PATH")]
    out: PathBuf,
    /// Override the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct DiffArgs {
    /// Baseline report (JSON)
    report_a: PathBuf,
    /// Comparison report (JSON)
    report_b: PathBuf,
    /// Stdout format for the comparison table
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    /// Check "metric ratio op value" where ratio is a/b; repeatable
    #[arg(long = "assert", value_name = "EXPR")]
    asserts: Vec<String>,
}

#[derive(Subcommand)]
enum RingCmd {
    /// Print the ring's members, point counts, and sampled key shares
    Inspect(RingInspectArgs),
}

#[derive(Args)]
struct RingInspectArgs {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// How many synthetic session ids to route when estimating shares
    #[arg(long, default_value_t = 10_000)]
    sessions: u32,
}

#[derive(Subcommand)]
enum ServeCmd {
    /// Serve one model node from the scenario
    Node(ServeNodeArgs),
    /// Serve the routing gateway for the scenario's cluster
    Gateway(ServeGatewayArgs),
}

#[derive(Args)]
struct ServeNodeArgs {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// Which node in the scenario to serve
    #[arg(long, value_name = "ID")]
    node: String,
    /// Listen address, e.g. 127.0.0.1:7101 (port 0 picks one)
    #[arg(long, value_name = "ADDR", env = "TURNGATE_NODE_LISTEN")]
    listen: String,
    /// Override the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ServeGatewayArgs {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// Listen address, e.g. 127.0.0.1:7100 (port 0 picks one)
    #[arg(long, value_name = "ADDR", env = "TURNGATE_GATEWAY_LISTEN")]
    listen: String,
    /// Upstream node address as ID=HOST:PORT; one per scenario node
    #[arg(long = "upstream", value_name = "ID=ADDR")]
    upstreams: Vec<String>,
    /// Force active health probing on or off
    #[arg(long, value_enum, value_name = "on|off")]
    health_checks: Option<Toggle>,
}

#[derive(Args)]
struct DriveArgs {
    /// Scenario file (TOML)
    scenario: PathBuf,
    /// Gateway address to send turns to
    #[arg(long, value_name = "ADDR", env = "TURNGATE_GATEWAY")]
    gateway: String,
    /// Node address as ID=HOST:PORT, used to collect cache counters; one per scenario node
    #[arg(long = "node", value_name = "ID=ADDR")]
    nodes: Vec<String>,
    /// Override the scenario's seed
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    output: OutputArgs,
}

struct Failure {
    code: u8,
    msg: String,
}

type CmdResult = Result<(), Failure>;

fn config_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        msg: e.to_string(),
    }
}

fn runtime_err(e: impl std::fmt::Display) -> Failure {
    Failure {
        code: EXIT_RUNTIME,
        msg: e.to_string(),
    }
}

fn net_err(e: NetError) -> Failure {
    let code = match &e {
        NetError::Io(io) if io.kind() == io::ErrorKind::AddrInUse => EXIT_PORT,
        NetError::Config(_) => EXIT_CONFIG,
        _ => EXIT_RUNTIME,
    };
    Failure {
        code,
        msg: e.to_string(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn run(cmd: Cmd) -> CmdResult {
    match cmd {
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Replay(a) => cmd_replay(a),
        Cmd::Trace(a) => cmd_trace(a),
        Cmd::Diff(a) => cmd_diff(a),
        Cmd::Ring(RingCmd::Inspect(a)) => cmd_ring_inspect(a),
        Cmd::Serve(ServeCmd::Node(a)) => cmd_serve_node(a),
        Cmd::Serve(ServeCmd::Gateway(a)) => cmd_serve_gateway(a),
        Cmd::Drive(a) => cmd_drive(a),
    }
}

/// Load a scenario and apply command-line overrides.
fn load_scenario(
    path: &Path,
    seed: Option<u64>,
    health: Option<Toggle>,
) -> Result<Scenario, Failure> {
    let mut sc = Scenario::load(path).map_err(config_err)?;
    if let Some(seed) = seed {
        sc.seed = seed;
    }
    if let Some(toggle) = health {
        sc.health.enabled = matches!(toggle, Toggle::On);
    }
    Ok(sc)
}

fn cmd_simulate(args: SimulateArgs) -> CmdResult {
    let sc = load_scenario(&args.scenario, args.seed, args.health_checks)?;
    let result = sim::run(&sc).map_err(runtime_err)?;
    if let Some(path) = &args.events {
        sim::write_events(path, &result.events)
            .map_err(|e| runtime_err(format!("writing {}: {e}", path.display())))?;
    }
    emit_report(&result.report, &args.output)
}

fn cmd_replay(args: ReplayArgs) -> CmdResult {
    let sc = load_scenario(&args.scenario, args.seed, args.health_checks)?;
    let turns = trace::load_trace(&args.trace).map_err(config_err)?;
    let result = sim::run_with_trace(&sc, &turns).map_err(runtime_err)?;
    if let Some(path) = &args.events {
        sim::write_events(path, &result.events)
            .map_err(|e| runtime_err(format!("writing {}: {e}", path.display())))?;
    }
    emit_report(&result.report, &args.output)
}

fn cmd_trace(args: TraceArgs) -> CmdResult {
    let sc = load_scenario(&args.scenario, args.seed, None)?;
    let turns = sc.generate_trace().map_err(runtime_err)?;
    trace::save_trace(&args.out, &turns)
        .map_err(|e| runtime_err(format!("writing {}: {e}", args.out.display())))?;
    let sessions: BTreeSet<&str> = turns.iter().map(|t| t.session.as_str()).collect();
    println!(
        "wrote {} turns across {} sessions to {}",
        turns.len(),
        sessions.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_diff(args: DiffArgs) -> CmdResult {
    let a = read_report(&args.report_a)?;
    let b = read_report(&args.report_b)?;
    let table = metrics::compare(&a, &b).map_err(config_err)?;
    match args.format {
        Format::Text => print!("{}", metrics::render_compare_text(&table)),
        Format::Structured => {
            let json = serde_json::to_string_pretty(&table).map_err(runtime_err)?;
            println!("{json}");
        }
    }
    check_diff_asserts(&table, &args.asserts)
}

fn cmd_ring_inspect(args: RingInspectArgs) -> CmdResult {
    let sc = load_scenario(&args.scenario, None, None)?;
    let ring = sc.build_ring().map_err(runtime_err)?;
    let sample: Vec<SessionId> = (0..args.sessions)
        .map(|i| SessionId::new(format!("probe-{i:06}")))
        .collect();
    let shares = ring.sample_shares(&sample).map_err(runtime_err)?;
    println!(
        "ring: {} members, {} points (vnodes_per_weight {}, hash_seed {})",
        ring.members().len(),
        ring.point_count(),
        ring.vnodes_per_weight(),
        ring.hash_seed()
    );
    println!("{:<20} {:>6} {:>7} {:>7}", "node", "weight", "points", "share");
    for (node, share) in &shares {
        let weight = ring
            .members()
            .iter()
            .find(|(n, _)| n == node)
            .map(|(_, w)| *w)
            .unwrap_or(0);
        println!(
            "{:<20} {:>6} {:>7} {:>7.3}",
            node.as_str(),
            weight,
            ring.points_of(node),
            share
        );
    }
    Ok(())
}

fn cmd_serve_node(args: ServeNodeArgs) -> CmdResult {
    let sc = load_scenario(&args.scenario, args.seed, None)?;
    let nc = sc
        .nodes
        .iter()
        .find(|n| n.id.as_str() == args.node)
        .ok_or_else(|| config_err(format!("scenario has no node {:?}", args.node)))?;
    let cfg = node::NodeServerConfig {
        id: nc.id.clone(),
        seed: sc.seed,
        cost: nc.cost,
        cache_capacity_tokens: nc.cache_capacity_tokens,
    };
    let handle = node::spawn(cfg, &args.listen).map_err(net_err)?;
    println!("node {} listening on {}", args.node, handle.addr());
    io::stdout().flush().ok();
    park()
}

fn cmd_serve_gateway(args: ServeGatewayArgs) -> CmdResult {
    let sc = load_scenario(&args.scenario, None, args.health_checks)?;
    let ring = sc.build_ring().map_err(runtime_err)?;
    let upstreams = parse_endpoints(&args.upstreams)?;
    let cfg = gateway::GatewayConfig {
        ring,
        upstreams,
        health: sc.health,
        request_timeout_ms: sc.request_timeout_ms,
    };
    let handle = gateway::spawn(cfg, &args.listen).map_err(net_err)?;
    println!("gateway listening on {}", handle.addr());
    io::stdout().flush().ok();
    park()
}

fn cmd_drive(args: DriveArgs) -> CmdResult {
    let sc = load_scenario(&args.scenario, args.seed, None)?;
    let gw = resolve_addr(&args.gateway)?;
    let node_addrs = parse_endpoints(&args.nodes)?;
    let result = driver::drive(&sc, gw, &node_addrs).map_err(net_err)?;
    emit_report(&result.report, &args.output)
}

/// Foreground servers run until interrupted; SIGINT/SIGTERM returns cleanly
/// so the component handles drop and stop their listener threads.
fn park() -> CmdResult {
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst))
        .map_err(|e| runtime_err(format!("installing signal handler: {e}")))?;
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(Duration::from_millis(50));
    }
    Ok(())
}

fn resolve_addr(s: &str) -> Result<SocketAddr, Failure> {
    s.to_socket_addrs()
        .map_err(|e| config_err(format!("bad address {s:?}: {e}")))?
        .next()
        .ok_or_else(|| config_err(format!("address {s:?} resolved to nothing")))
}

fn parse_endpoints(entries: &[String]) -> Result<BTreeMap<String, SocketAddr>, Failure> {
    let mut map = BTreeMap::new();
    for entry in entries {
        let (id, addr) = entry
            .split_once('=')
            .ok_or_else(|| config_err(format!("bad endpoint {entry:?}: expected ID=HOST:PORT")))?;
        if id.is_empty() {
            return Err(config_err(format!("bad endpoint {entry:?}: empty node id")));
        }
        let addr = resolve_addr(addr)?;
        if map.insert(id.to_string(), addr).is_some() {
            return Err(config_err(format!("duplicate endpoint for node {id:?}")));
        }
    }
    Ok(map)
}

fn read_report(path: &Path) -> Result<RunReport, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("reading {}: {e}", path.display())))?;
    RunReport::from_json(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
}

/// Print the report, write `--out` if asked, then evaluate `--assert`
/// expressions. The report file is written before asserts run so a failed
/// gate still leaves the artifact behind for inspection.
fn emit_report(report: &RunReport, out: &OutputArgs) -> CmdResult {
    if let Some(path) = &out.out {
        fs::write(path, report.to_json())
            .map_err(|e| runtime_err(format!("writing {}: {e}", path.display())))?;
    }
    match out.format {
        Format::Text => print!("{}", metrics::render_text(report)),
        Format::Structured => print!("{}", report.to_json()),
    }
    check_run_asserts(&report.metric_map(), &out.asserts)
}

#[derive(Clone, Copy)]
enum Op {
    Ge,
    Le,
    Gt,
    Lt,
    Eq,
    Ne,
}

impl Op {
    fn parse(s: &str) -> Option<Op> {
        match s {
            ">=" => Some(Op::Ge),
            "<=" => Some(Op::Le),
            ">" => Some(Op::Gt),
            "<" => Some(Op::Lt),
            "==" => Some(Op::Eq),
            "!=" => Some(Op::Ne),
            _ => None,
        }
    }

    fn eval(self, actual: f64, want: f64) -> bool {
        match self {
            Op::Ge => actual >= want,
            Op::Le => actual <= want,
            Op::Gt => actual > want,
            Op::Lt => actual < want,
            Op::Eq => actual == want,
            Op::Ne => actual != want,
        }
    }
}

fn parse_expr<'a>(expr: &'a str, form: &str) -> Result<(&'a str, Op, f64), Failure> {
    let bad = |why: String| config_err(format!("bad assert {expr:?}: {why} (expected \"{form}\")"));
    let toks: Vec<&str> = expr.split_whitespace().collect();
    let (key, op_s, val_s) = match (form, toks.as_slice()) {
        ("<metric> <op> <value>", [k, o, v]) => (*k, *o, *v),
        ("<metric> ratio <op> <value>", [k, "ratio", o, v]) => (*k, *o, *v),
        _ => return Err(bad("wrong shape".into())),
    };
    let op = Op::parse(op_s).ok_or_else(|| bad(format!("unknown operator {op_s:?}")))?;
    let want: f64 = val_s
        .parse()
        .map_err(|_| bad(format!("{val_s:?} is not a number")))?;
    Ok((key, op, want))
}

fn tally(expr: &str, actual: f64, op: Op, want: f64, failures: &mut usize) {
    if op.eval(actual, want) {
        eprintln!("assert ok: {expr} (actual {actual})");
    } else {
        eprintln!("assert FAILED: {expr} (actual {actual})");
        *failures += 1;
    }
}

fn assert_verdict(failures: usize) -> CmdResult {
    if failures > 0 {
        Err(Failure {
            code: EXIT_ASSERT,
            msg: format!("{failures} assertion(s) failed"),
        })
    } else {
        Ok(())
    }
}

fn check_run_asserts(map: &BTreeMap<String, f64>, exprs: &[String]) -> CmdResult {
    let mut failures = 0;
    for expr in exprs {
        let (key, op, want) = parse_expr(expr, "<metric> <op> <value>")?;
        let actual = *map.get(key).ok_or_else(|| {
            config_err(format!(
                "assert references unknown metric {key:?}; the report has: {}",
                map.keys().cloned().collect::<Vec<_>>().join(", ")
            ))
        })?;
        tally(expr, actual, op, want, &mut failures);
    }
    assert_verdict(failures)
}

fn check_diff_asserts(table: &CompareTable, exprs: &[String]) -> CmdResult {
    let mut failures = 0;
    for expr in exprs {
        let (key, op, want) = parse_expr(expr, "<metric> ratio <op> <value>")?;
        let actual = table.ratio_of(key).map_err(|e| match e {
            MetricsError::UndefinedRatio(_) => runtime_err(e),
            other => config_err(other),
        })?;
        tally(expr, actual, op, want, &mut failures);
    }
    assert_verdict(failures)
}
