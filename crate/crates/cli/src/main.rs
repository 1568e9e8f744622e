use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use seclambda::builder::{build_policies, BuildOptions, PolicySet, DEFAULT_T_LCP};
use seclambda::clock::SystemClock;
use seclambda::controller::{serve, Controller, TenantConfig};
use seclambda::enforcer::{bench_check, EnforcementMode};
use seclambda::harness::{self, fixtures, AppSpec, Directive, RunOptions, RunReport, Scenario};
use seclambda::model::{read_trace_log, AppExecution, LocalFlowGraph, ServiceEndpoint, Topology};
use seclambda::protocol::{controller_addr, CONTROLLER_ENV};

#[derive(Parser)]
#[command(name = "seclambda", version, about = "Flow-graph learning and enforcement for serverless applications")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or inspect flow graphs.
    Graph {
        #[command(subcommand)]
        command: GraphCommand,
    },
    /// Run the central controller.
    Controller {
        #[command(subcommand)]
        command: ControllerCommand,
    },
    /// Run a simulated application.
    Simulate(SimulateArgs),
    /// Inject an attack into a simulated application and check it is caught.
    Attack(AttackArgs),
    /// Error curve over growing training sets, as CSV.
    Eval(EvalArgs),
    /// Time policy checks on a chain graph.
    Bench {
        #[arg(long, default_value_t = 1000)]
        nodes: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
    },
}

#[derive(Subcommand)]
enum GraphCommand {
    /// Learn a policy file from a directory of trace logs (one per application run).
    Build {
        #[arg(long)]
        traces: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_T_LCP)]
        t_lcp: usize,
        /// JSON list of `{name, base_url}` service endpoints.
        #[arg(long, conflicts_with = "app")]
        topology: Option<PathBuf>,
        /// Take the service endpoints from an application spec or fixture.
        #[arg(long)]
        app: Option<String>,
    },
    /// Print a policy or local graph file and its DOT rendering.
    Inspect {
        file: PathBuf,
        /// Write DOT here instead of stdout.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ControllerCommand {
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the address in the controller environment variable.
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Record,
    Enforce,
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// Fixture name or application spec file.
    #[arg(long)]
    app: String,
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long, default_value_t = 10)]
    requests: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Policy file for enforce mode.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long)]
    fail_open: bool,
    /// Start all requests at once instead of one per second.
    #[arg(long)]
    concurrent: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    Exfiltrate,
    Repeat,
    Bypass,
    OutOfOrder,
}

#[derive(clap::Args)]
struct AttackArgs {
    #[arg(long, default_value = "photo")]
    app: String,
    #[arg(long, value_enum)]
    scenario: ScenarioKind,
    /// Target function. Chosen from the application when omitted.
    #[arg(long)]
    function: Option<String>,
    /// Destination of the exfiltration.
    #[arg(long, default_value = "https://attacker.example.net/exfil")]
    url: String,
    /// Repetitions for the repeat attack. Defaults to one more than any learned counter.
    #[arg(long)]
    times: Option<u32>,
    /// Source claimed by the bypass invocation.
    #[arg(long)]
    source: Option<String>,
    /// Policy file. Without it, policies are learned from `--train` benign requests.
    #[arg(long)]
    policy: Option<PathBuf>,
    #[arg(long, default_value_t = 30)]
    train: usize,
    #[arg(long, default_value_t = 1)]
    requests: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct EvalArgs {
    #[arg(long)]
    app: String,
    #[arg(long, default_value_t = 10)]
    rounds: usize,
    #[arg(long, default_value_t = 3)]
    per_round: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV file. Defaults to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_app(name: &str) -> Result<AppSpec> {
    if let Some(app) = fixtures::by_name(name) {
        return Ok(app);
    }
    let text = fs::read_to_string(name)
        .with_context(|| format!("{name} is neither a fixture ({}) nor a readable file", fixtures::NAMES.join(", ")))?;
    let app: AppSpec = serde_json::from_str(&text).with_context(|| format!("parsing {name}"))?;
    app.validate()?;
    Ok(app)
}

fn load_policy(path: &Path) -> Result<PolicySet> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let set: PolicySet = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for g in set.local.values() {
        g.validate().with_context(|| format!("{}: graph of {}", path.display(), g.function))?;
    }
    set.global.validate().with_context(|| format!("{}: global graph", path.display()))?;
    Ok(set)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_executions(dir: &Path) -> Result<Vec<AppExecution>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
        .collect();
    files.sort();
    let mut out = Vec::new();
    for f in files {
        let events = read_trace_log(&f).with_context(|| format!("{}", f.display()))?;
        if events.is_empty() {
            continue;
        }
        let id = f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        out.push(AppExecution { id, events });
    }
    if out.is_empty() {
        bail!("no trace events found in {}", dir.display());
    }
    Ok(out)
}

fn graph_build(traces: &Path, out: &Path, t_lcp: usize, topology: Option<&Path>, app: Option<&str>) -> Result<()> {
    let topology = match (topology, app) {
        (Some(p), _) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let services: Vec<ServiceEndpoint> = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            Topology { services }
        }
        (None, Some(a)) => load_app(a)?.topology(),
        (None, None) => Topology::default(),
    };
    let executions = read_executions(traces)?;
    let set = build_policies(&executions, &topology, BuildOptions { t_lcp })?;
    write_json(out, &set)?;
    eprintln!("{} functions from {} runs -> {}", set.local.len(), executions.len(), out.display());
    Ok(())
}

fn graph_inspect(file: &Path, dot_out: Option<&Path>) -> Result<()> {
    let text = fs::read_to_string(file).with_context(|| format!("reading {}", file.display()))?;
    let (locals, global) = match serde_json::from_str::<PolicySet>(&text) {
        Ok(set) => (set.local.into_values().collect::<Vec<_>>(), Some(set.global)),
        Err(_) => (vec![LocalFlowGraph::from_json(&text).with_context(|| format!("parsing {}", file.display()))?], None),
    };
    let mut dot = String::new();
    for g in &locals {
        g.validate().with_context(|| format!("graph of {}", g.function))?;
        println!("function {} ({} nodes, {} edges)", g.function, g.nodes.len(), g.edges.len());
        for n in &g.nodes {
            let next: Vec<String> = g.edges.iter().filter(|e| e.from == n.id).map(|e| e.to.to_string()).collect();
            println!("  {:>3}  {:<60} -> {}", n.id, n.label(), next.join(","));
        }
        dot.push_str(&g.to_dot());
    }
    if let Some(g) = &global {
        println!("global ({} nodes, {} edges, entries: {})", g.nodes.len(), g.edges.len(), g.entries.join(","));
        for e in &g.edges {
            let via = e.via.as_deref().map(|v| format!(" via {v}")).unwrap_or_default();
            println!("  {} -> {} [{:?}{via}]", e.from, e.to, e.kind);
        }
        dot.push_str(&g.to_dot());
    }
    match dot_out {
        Some(p) => fs::write(p, dot).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{dot}"),
    }
    Ok(())
}

fn controller_run(config: &Path, listen: Option<&str>) -> Result<()> {
    let config = TenantConfig::load(config)?;
    let Some(addr) = controller_addr(listen) else {
        bail!("no listen address: pass --listen or set {CONTROLLER_ENV}");
    };
    let controller = Arc::new(Controller::new(config)?);
    let listener = TcpListener::bind(&addr).with_context(|| format!("binding {addr}"))?;
    eprintln!("controller listening on {}", listener.local_addr()?);
    serve(controller, listener, Arc::new(SystemClock::default()))?;
    Ok(())
}

fn summary(app: &AppSpec, mode: &str, opts: &RunOptions, run: &RunReport) -> serde_json::Value {
    serde_json::json!({
        "app": app.name,
        "mode": mode,
        "seed": opts.seed,
        "requests": opts.requests,
        "executions": run.executions.len(),
        "events": run.executions.iter().map(|e| e.events.len()).sum::<usize>(),
        "decisions": run.decisions.len(),
        "denials": run.denials().count(),
        "alarms": run.alarms,
        "throttled": run.throttled,
        "errors": run.errors,
    })
}

fn simulate(args: &SimulateArgs) -> Result<()> {
    let app = load_app(&args.app)?;
    let mut opts = RunOptions { seed: args.seed, requests: args.requests, ..Default::default() };
    if args.concurrent {
        opts.request_gap_ns = 0;
    }
    fs::create_dir_all(&args.out)?;
    let (mode, run) = match args.mode {
        Mode::Record => {
            let run = harness::record(&app, &opts)?;
            run.write_traces(&args.out)?;
            ("record", run)
        }
        Mode::Enforce => {
            let Some(policy) = &args.policy else { bail!("--mode enforce needs --policy") };
            let mode = if args.fail_open { EnforcementMode::Open } else { EnforcementMode::Closed };
            let controller = harness::controller_for(&app, Some(load_policy(policy)?), mode)?;
            let run = harness::enforce(&app, Arc::clone(&controller), &opts, &[])?;
            let mut w = BufWriter::new(fs::File::create(args.out.join("decisions.jsonl"))?);
            for d in &run.decisions {
                writeln!(w, "{}", serde_json::to_string(d)?)?;
            }
            w.flush()?;
            let mut log = BufWriter::new(fs::File::create(args.out.join("controller.jsonl"))?);
            controller.write_log(&mut log)?;
            log.flush()?;
            ("enforce", run)
        }
    };
    let s = summary(&app, mode, &opts, &run);
    write_json(&args.out.join("summary.json"), &s)?;
    println!("{}", serde_json::to_string(&s)?);
    Ok(())
}

fn distinct_sends(script: &[Directive]) -> usize {
    let mut urls: Vec<&str> = script
        .iter()
        .filter_map(|d| match d {
            Directive::Send(s) => Some(s.url.as_str()),
            _ => None,
        })
        .collect();
    urls.dedup();
    urls.len()
}

fn pick_scenario(app: &AppSpec, policies: &PolicySet, args: &AttackArgs) -> Result<Scenario> {
    let entry = || app.entry_functions[0].clone();
    Ok(match args.scenario {
        ScenarioKind::Exfiltrate => Scenario::Exfiltrate {
            function: args.function.clone().unwrap_or_else(entry),
            url: args.url.clone(),
        },
        ScenarioKind::Repeat => {
            let function = args.function.clone().unwrap_or_else(entry);
            let learned = policies.local.get(&function).map_or(1, |g| g.nodes.iter().map(|n| n.counter).max().unwrap_or(1));
            Scenario::Repeat { function, times: args.times.unwrap_or(learned + 1), prefix: None }
        }
        ScenarioKind::Bypass => {
            let triggered: BTreeMap<&str, &str> = app
                .services
                .iter()
                .flat_map(|s| s.triggers.iter().map(move |t| (t.function.as_str(), s.name.as_str())))
                .collect();
            let function = match &args.function {
                Some(f) => f.clone(),
                None => match triggered.keys().next() {
                    Some(f) => f.to_string(),
                    None => bail!("{} has no service-triggered function; pass --function", app.name),
                },
            };
            let source = args
                .source
                .clone()
                .or_else(|| triggered.get(function.as_str()).map(|s| s.to_string()))
                .unwrap_or_else(|| harness::USER.to_string());
            Scenario::Bypass { function, source }
        }
        ScenarioKind::OutOfOrder => {
            let function = match &args.function {
                Some(f) => f.clone(),
                None => match app.functions.iter().find(|f| distinct_sends(&f.script) >= 2) {
                    Some(f) => f.name.clone(),
                    None => bail!("{} has no function with two different sends", app.name),
                },
            };
            Scenario::OutOfOrder { function }
        }
    })
}

fn attack(args: &AttackArgs) -> Result<bool> {
    let app = load_app(&args.app)?;
    let policies = match &args.policy {
        Some(p) => load_policy(p)?,
        None => {
            let opts = RunOptions { seed: args.seed, requests: args.train, ..Default::default() };
            let run = harness::record(&app, &opts)?;
            build_policies(&run.executions, &app.topology(), BuildOptions::default())?
        }
    };
    let scenario = pick_scenario(&app, &policies, args)?;
    let opts = RunOptions { seed: args.seed.wrapping_add(1), requests: args.requests, ..Default::default() };
    let report = harness::inject(&app, &policies, &scenario, &opts)?;
    let out = serde_json::json!({
        "scenario": report.scenario,
        "detected": report.detected,
        "first_denial": report.first_denial,
        "occurrence": report.occurrence,
        "alarms": report.alarms,
    });
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(report.detected)
}

fn eval(args: &EvalArgs) -> Result<()> {
    if args.rounds == 0 {
        bail!("--rounds must be at least 1");
    }
    let app = load_app(&args.app)?;
    let curve = harness::eval_rounds(&app, args.rounds, args.per_round, args.seed)?;
    match &args.out {
        Some(p) => {
            let f = fs::File::create(p).with_context(|| format!("writing {}", p.display()))?;
            harness::write_curve_csv(BufWriter::new(f), &curve)?;
        }
        None => harness::write_curve_csv(io::stdout().lock(), &curve)?,
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Graph { command: GraphCommand::Build { traces, out, t_lcp, topology, app } } => {
            graph_build(&traces, &out, t_lcp, topology.as_deref(), app.as_deref())?
        }
        Command::Graph { command: GraphCommand::Inspect { file, dot } } => graph_inspect(&file, dot.as_deref())?,
        Command::Controller { command: ControllerCommand::Run { config, listen } } => {
            controller_run(&config, listen.as_deref())?
        }
        Command::Simulate(args) => simulate(&args)?,
        Command::Attack(args) => {
            if !attack(&args)? {
                eprintln!("attack was not detected");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Eval(args) => eval(&args)?,
        Command::Bench { nodes, iters } => {
            if nodes == 0 {
                bail!("--nodes must be at least 1");
            }
            let elapsed = bench_check(nodes, iters);
            println!("{iters} checks on a {nodes}-node chain: {:.3} ms", elapsed.as_secs_f64() * 1e3);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
