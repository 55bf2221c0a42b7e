mod table;

use std::collections::btree_map::Entry;
use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use verifarm::autoscale::{Controller, ProcessLauncher};
use verifarm::clock::{Clock, SystemClock};
use verifarm::fabric::http::{serve, ServeOptions};
use verifarm::fabric::{Fabric, FabricConfig, FabricService, HttpFabric, LauncherMode};
use verifarm::model::{ClientId, ResultRecord, TaskId, Timestamp, ToolVersionId};
use verifarm::orchestrator::{self, Backend, Manifest, RunOptions, RunReport};
use verifarm::sim::{self, presets, SimConfig};
use verifarm::worker::{default_worker_id, WorkerAgent, WorkerConfig};

use table::Table;

#[derive(Parser)]
#[command(name = "verifarm", version, about = "Farm static-analysis checks out to a pool of workers")]
struct Cli {
    /// Print structured JSON instead of tables.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the fabric service.
    #[command(subcommand)]
    Fabric(FabricCommand),
    /// Run a worker agent against a fabric.
    Worker(WorkerArgs),
    /// Build a manifest's modules, run every check and report outcomes.
    Submit(SubmitArgs),
    /// Show the results published for a client.
    Results(ResultsArgs),
    /// Show active workers and queued tasks.
    Monitor(FabricArg),
    /// Manage tool versions.
    #[command(subcommand)]
    Versions(VersionsCommand),
    /// Run the discrete-event simulator.
    Simulate(SimulateArgs),
}

#[derive(Subcommand)]
enum FabricCommand {
    /// Serve the fabric API until SIGINT or SIGTERM.
    Serve(ServeArgs),
}

#[derive(Args)]
struct ServeArgs {
    /// Fabric configuration file (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured listen address.
    #[arg(long)]
    listen: Option<String>,
    /// Overrides the configured state root.
    #[arg(long)]
    root: Option<PathBuf>,
    /// Overrides the configured launcher mode.
    #[arg(long, value_enum)]
    launcher: Option<LauncherArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LauncherArg {
    Process,
    None,
}

#[derive(Args)]
struct FabricArg {
    /// Fabric base URL.
    #[arg(long, env = "VERIFARM_FABRIC")]
    fabric: String,
}

#[derive(Args)]
struct WorkerArgs {
    #[command(flatten)]
    fabric: FabricArg,
    /// Seconds between polls of an empty queue.
    #[arg(long, default_value_t = 1.0)]
    poll_interval: f64,
    #[arg(long)]
    id: Option<String>,
    /// Version cache and scratch space.
    #[arg(long, conflicts_with = "cache_root")]
    cache_dir: Option<PathBuf>,
    /// Parent directory; the cache goes in a subdirectory named after the worker id.
    #[arg(long)]
    cache_root: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Local,
    Cloud,
}

#[derive(Args)]
struct SubmitArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Overrides the manifest's backend.
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Fabric base URL for the cloud backend.
    #[arg(long, env = "VERIFARM_FABRIC")]
    fabric: Option<String>,
    /// Give up on unresolved tasks after this many seconds.
    #[arg(long)]
    deadline: Option<f64>,
    /// Seconds between result polls.
    #[arg(long, default_value_t = 2.0)]
    poll_interval: f64,
    /// Scratch directory for local execution.
    #[arg(long)]
    work_dir: Option<PathBuf>,
}

#[derive(Args)]
struct ResultsArgs {
    #[arg(long)]
    client: ClientId,
    #[command(flatten)]
    fabric: FabricArg,
}

#[derive(Subcommand)]
enum VersionsCommand {
    /// Upload a zipped tool build.
    Upload {
        #[arg(long)]
        id: String,
        #[arg(long)]
        archive: PathBuf,
        #[command(flatten)]
        fabric: FabricArg,
    },
    /// List uploaded versions.
    List(FabricArg),
}

#[derive(Args)]
struct SimulateArgs {
    /// Simulation configuration file (JSON).
    #[arg(long, required_unless_present = "preset", conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in calibrated configuration.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(presets::NAMES))]
    preset: Option<String>,
    /// Comma-separated worker caps; runs the local baseline plus one cloud run per cap.
    #[arg(long, value_delimiter = ',')]
    caps: Vec<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Writes the JSON report here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Writes the experiment table as CSV here (requires --caps).
    #[arg(long, requires = "caps")]
    csv: Option<PathBuf>,
}

/// Misuse that clap cannot detect on its own; exits like a usage error.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let json = cli.json;
    let result = match cli.command {
        Command::Fabric(FabricCommand::Serve(args)) => fabric_serve(args, json),
        Command::Worker(args) => worker(args),
        Command::Submit(args) => submit(args, json),
        Command::Results(args) => results(args, json),
        Command::Monitor(args) => monitor(args, json),
        Command::Versions(cmd) => versions(cmd, json),
        Command::Simulate(args) => simulate(args, json),
    };
    match result {
        Ok(code) => code,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn print_json<T: Serialize>(value: &T) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

fn age(now: Timestamp, then: Timestamp) -> String {
    format!("{:.0}s ago", now.saturating_sub(then) as f64 / 1000.0)
}

fn hhmm(s: f64) -> String {
    let m = (s / 60.0).round() as u64;
    format!("{:02}:{:02}", m / 60, m % 60)
}

fn fabric_serve(args: ServeArgs, json: bool) -> anyhow::Result<ExitCode> {
    let mut config: FabricConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => FabricConfig::default(),
    };
    if let Some(listen) = args.listen {
        config.listen = listen;
    }
    if let Some(root) = args.root {
        config.root = root;
    }
    match args.launcher {
        Some(LauncherArg::Process) => config.launcher = LauncherMode::Process,
        Some(LauncherArg::None) => config.launcher = LauncherMode::None,
        None => {}
    }
    config.autoscale.validate().map_err(|e| UsageError(format!("autoscale: {e}")))?;

    let service = Arc::new(FabricService::open(&config)?);
    let server = serve(
        Arc::clone(&service),
        &config.listen,
        ServeOptions {
            handle_signals: true,
            ..ServeOptions::default()
        },
    )
    .with_context(|| format!("binding {}", config.listen))?;
    let url = server.url();
    if json {
        print_json(&serde_json::json!({ "url": url, "root": config.root }))?;
    } else {
        println!("fabric listening on {url} (state in {})", config.root.display());
    }
    std::io::stdout().flush()?;

    let stop = Arc::new(AtomicBool::new(false));
    let scaler = match config.launcher {
        LauncherMode::Process => {
            let exe = std::env::current_exe()?;
            let cache_root = config.root.join("workers");
            let worker_args = vec![
                "worker".to_owned(),
                "--fabric".to_owned(),
                url.clone(),
                "--poll-interval".to_owned(),
                config.worker_poll_interval_s.to_string(),
                "--cache-root".to_owned(),
                cache_root.to_string_lossy().into_owned(),
            ];
            let policy = config.autoscale;
            let service = Arc::clone(&service);
            let stop = Arc::clone(&stop);
            Some(std::thread::spawn(move || {
                let mut launcher = ProcessLauncher::new(exe, worker_args, "worker");
                let mut controller = Controller::new(policy, SystemClock.now());
                let mut rng = rand::rng();
                controller.bootstrap(&mut launcher);
                while !stop.load(Ordering::SeqCst) {
                    let now = SystemClock.now();
                    for p in controller.tick(now, service.queue_len(), &mut launcher, &mut rng) {
                        log::info!("scale out: worker ready in {:.0}s", p.ready_at.saturating_sub(now) as f64 / 1000.0);
                    }
                    launcher.poll(now);
                    std::thread::sleep(Duration::from_millis(200));
                }
                launcher.shutdown();
            }))
        }
        LauncherMode::None => None,
    };
    server.join();
    stop.store(true, Ordering::SeqCst);
    if let Some(t) = scaler {
        let _ = t.join();
    }
    log::info!("fabric stopped");
    Ok(ExitCode::SUCCESS)
}

fn worker(args: WorkerArgs) -> anyhow::Result<ExitCode> {
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
    if !(args.poll_interval > 0.0) {
        return Err(UsageError("--poll-interval must be > 0".into()).into());
    }
    let id = args.id.unwrap_or_else(default_worker_id);
    let cache_dir = match (args.cache_dir, args.cache_root) {
        (Some(dir), _) => dir,
        (None, Some(root)) => root.join(&id),
        (None, None) => std::env::temp_dir().join("verifarm-workers").join(&id),
    };
    let mut config = WorkerConfig::new(id.clone(), cache_dir);
    config.poll_interval = secs(args.poll_interval);
    let fabric = HttpFabric::new(&args.fabric.fabric)?;
    let mut agent = WorkerAgent::new(fabric, config).context("preparing the worker cache")?;

    let shutdown = Arc::new(AtomicBool::new(false));
    for signal in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(signal, Arc::clone(&shutdown))?;
    }
    log::info!("worker {id} polling {}", args.fabric.fabric);
    agent.run(&shutdown);
    log::info!("worker {id} stopped");
    Ok(ExitCode::SUCCESS)
}

fn submit(args: SubmitArgs, json: bool) -> anyhow::Result<ExitCode> {
    let manifest = Manifest::load(&args.manifest)?;
    let backend = match (args.backend, &manifest.backend) {
        (Some(BackendArg::Local), _) => Backend::Local,
        (Some(BackendArg::Cloud), _) | (None, Backend::Cloud { .. }) => {
            let fabric = args
                .fabric
                .clone()
                .or(match &manifest.backend {
                    Backend::Cloud { fabric } => Some(fabric.clone()),
                    Backend::Local => None,
                })
                .ok_or_else(|| UsageError("the cloud backend needs --fabric or VERIFARM_FABRIC".into()))?;
            Backend::Cloud { fabric }
        }
        (None, Backend::Local) => Backend::Local,
    };
    let opts = RunOptions {
        backend: Some(backend),
        poll_interval: secs(args.poll_interval),
        deadline: args.deadline.map(secs),
        work_dir: args.work_dir,
    };
    let report = orchestrator::run(&manifest, &opts)?;
    if json {
        print_json(&report)?;
    } else {
        print!("{}", render_report(&report));
    }
    Ok(if report.is_clean() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn render_report(report: &RunReport) -> String {
    let mut out = format!(
        "client {}  backend {}  tasks {}  wall clock {:.1}s\n\n",
        report.client,
        report.backend,
        report.tasks.len(),
        report.wall_clock
    );
    let kinds: Vec<&String> = report.counts.keys().collect();
    let mut modules = Table::new(std::iter::once("MODULE".to_owned()).chain(kinds.iter().map(|k| k.to_string())).chain(["ERROR".to_owned()]));
    for m in &report.modules {
        let cells = std::iter::once(m.name.clone())
            .chain(kinds.iter().map(|k| m.counts.get(*k).copied().unwrap_or(0).to_string()))
            .chain([m.error.clone().unwrap_or_default()]);
        modules.row(cells);
    }
    out.push_str(&modules.render());
    let mut problems = Table::new(["TASK", "MODULE", "RULE", "OUTCOME", "DETAIL"]);
    for t in report.tasks.iter().filter(|t| t.kind != "Pass") {
        let detail = t.record.as_ref().and_then(|r| r.outcome.detail.clone()).unwrap_or_default();
        problems.row([t.task.to_string(), t.module.clone(), t.rule.clone(), t.kind.clone(), detail]);
    }
    if !problems.is_empty() {
        out.push('\n');
        out.push_str(&problems.render());
    }
    for (id, why) in &report.submit_failures {
        out.push_str(&format!("submit failed for {id}: {why}\n"));
    }
    let totals: Vec<String> = report.counts.iter().map(|(k, n)| format!("{k} {n}")).collect();
    out.push_str(&format!("\ntotal: {}\n", totals.join(", ")));
    out
}

#[derive(Serialize)]
struct ResultsOutput {
    client: ClientId,
    records: Vec<ResultRecord>,
    duplicates: usize,
}

fn results(args: ResultsArgs, json: bool) -> anyhow::Result<ExitCode> {
    let fabric = HttpFabric::new(&args.fabric.fabric)?;
    let topic = args.client.to_string();
    let mut cursor = 0;
    let mut first: BTreeMap<TaskId, ResultRecord> = BTreeMap::new();
    let mut duplicates = 0;
    loop {
        let (records, next) = fabric.poll(&topic, cursor)?;
        if records.is_empty() {
            break;
        }
        for r in records {
            match first.entry(r.task) {
                Entry::Occupied(_) => duplicates += 1,
                Entry::Vacant(slot) => {
                    slot.insert(r);
                }
            }
        }
        cursor = next;
    }
    let mut records: Vec<ResultRecord> = first.into_values().collect();
    records.sort_by_key(|r| (r.completed_at, r.task));
    if json {
        print_json(&ResultsOutput {
            client: args.client,
            records,
            duplicates,
        })?;
    } else {
        let mut t = Table::new(["TASK", "OUTCOME", "WORKER", "DEQUEUES", "WAIT", "PROCESSING"]);
        for r in &records {
            t.row([
                r.task.to_string(),
                r.outcome.kind.to_string(),
                r.worker.clone(),
                r.dequeue_count.to_string(),
                format!("{:.1}s", r.queue_wait),
                format!("{:.1}s", r.processing_time),
            ]);
        }
        print!("{}", t.render());
        println!("{} results, {duplicates} duplicates", records.len());
    }
    Ok(ExitCode::SUCCESS)
}

fn monitor(args: FabricArg, json: bool) -> anyhow::Result<ExitCode> {
    let fabric = HttpFabric::new(&args.fabric)?;
    let snap = fabric.monitor()?;
    if json {
        print_json(&snap)?;
        return Ok(ExitCode::SUCCESS);
    }
    let now = SystemClock.now();
    println!("deployment {}  active workers {}  queued tasks {}\n", snap.deployment, snap.active_workers, snap.queue.len());
    let mut workers = Table::new(["WORKER", "LAST SEEN", "TASK"]);
    for w in &snap.workers {
        workers.row([
            w.id.clone(),
            age(now, w.last_seen),
            w.current_task.map(|t| t.to_string()).unwrap_or_else(|| "-".into()),
        ]);
    }
    print!("{}", workers.render());
    println!();
    let mut queue = Table::new(["TASK", "MODULE", "RULE", "VERSION", "SUBMITTED", "STATE", "DEQUEUES", "COMMAND"]);
    for row in &snap.queue {
        queue.row([
            row.id.to_string(),
            row.module_name.clone(),
            row.rule_name.clone(),
            row.version.to_string(),
            age(now, row.submitted_at),
            format!("{:?}", row.state).to_lowercase(),
            row.dequeue_count.to_string(),
            row.command.clone(),
        ]);
    }
    print!("{}", queue.render());
    Ok(ExitCode::SUCCESS)
}

fn versions(cmd: VersionsCommand, json: bool) -> anyhow::Result<ExitCode> {
    match cmd {
        VersionsCommand::Upload { id, archive, fabric } => {
            let id = ToolVersionId::new(id);
            let bytes = std::fs::read(&archive).with_context(|| format!("reading {}", archive.display()))?;
            let package = HttpFabric::new(&fabric.fabric)?.upload_version(&id, &bytes)?;
            if json {
                print_json(&package)?;
            } else {
                println!("uploaded {} ({} bytes, sha256 {})", package.id, bytes.len(), package.archive.content_hash);
            }
        }
        VersionsCommand::List(fabric) => {
            let list = HttpFabric::new(&fabric.fabric)?.list_versions()?;
            if json {
                print_json(&list)?;
            } else {
                let now = SystemClock.now();
                let mut t = Table::new(["VERSION", "UPLOADED", "SHA256"]);
                for p in &list {
                    t.row([p.id.to_string(), age(now, p.uploaded_at), p.archive.content_hash.clone()]);
                }
                print!("{}", t.render());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn load_sim_config(path: &Path) -> anyhow::Result<SimConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn simulate(args: SimulateArgs, json: bool) -> anyhow::Result<ExitCode> {
    let mut config = match (&args.config, &args.preset) {
        (Some(path), _) => load_sim_config(path)?,
        (None, Some(name)) => presets::by_name(name).expect("validated by clap"),
        (None, None) => unreachable!("clap requires one of --config and --preset"),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.validate().map_err(UsageError)?;
    let output = if args.caps.is_empty() {
        let report = sim::simulate(&config).map_err(anyhow::Error::msg)?;
        if !json {
            print_sim_report(&report);
        }
        serde_json::to_value(&report)?
    } else {
        let table = sim::run_experiment_table(&config, &args.caps).map_err(anyhow::Error::msg)?;
        if let Some(csv) = &args.csv {
            std::fs::write(csv, table.to_csv()).with_context(|| format!("writing {}", csv.display()))?;
        }
        if !json {
            let mut t = Table::new(["WORKERS", "MAKESPAN", "SPEEDUP", "PEAK", "MEAN WAIT"]);
            t.row(["local".to_owned(), hhmm(table.local_makespan), "1.00x".into(), config.local_cores.to_string(), "-".into()]);
            for r in &table.rows {
                t.row([
                    r.cap.to_string(),
                    hhmm(r.makespan),
                    format!("{:.2}x", r.speedup),
                    r.peak_workers.to_string(),
                    format!("{:.1}s", r.mean_wait),
                ]);
            }
            println!("{} checks, times hh:mm", table.checks);
            print!("{}", t.render());
        }
        serde_json::to_value(&table)?
    };
    if let Some(out) = &args.out {
        std::fs::write(out, serde_json::to_vec_pretty(&output)?).with_context(|| format!("writing {}", out.display()))?;
    }
    if json {
        print_json(&output)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn print_sim_report(r: &sim::SimReport) {
    let s = &r.wait_stats;
    println!("makespan        {:.1}s ({})", r.makespan, hhmm(r.makespan));
    println!("tasks           {} enqueued, {} completed, {} exhausted", r.enqueued, r.completed, r.exhausted);
    println!("peak workers    {}", r.peak_workers());
    println!("crashes         {}", r.crashes);
    println!("duplicates      {}", r.duplicate_processing);
    println!(
        "queue wait      mean {:.2}s  median {:.2}s  std {:.2}s  min {:.2}s  max {:.2}s",
        s.mean, s.median, s.std, s.min, s.max
    );
    println!("trace hash      {}", r.trace_hash);
}
