use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use heapscout::aborts::{coverage_table, AbortTally};
use heapscout::campaign::{fuzz, CampaignConfig, DEFAULT_MAX_INPUT};
use heapscout::codec::{decode, encode, Action, BugAction, Strategy, Value};
use heapscout::minimizer::{minimize, WorkerOracle};
use heapscout::model::{ModelSpec, SizeGroup, SizePick};
use heapscout::poc::{compile_and_run, emit, DEFAULT_CC};
use heapscout::report::ImpactReport;
use heapscout::sandbox::{parse_signal, run_one_shot, ForkServer, Outcome, RunResult, WorkerClient, WorkerConfig};
use heapscout::target::TargetSource;

// Keeps Rust-side allocations off the allocator under test.
#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "heapscout", version, about = "Find heap exploitation primitives in memory allocators")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a fuzzing campaign.
    Fuzz(FuzzArgs),
    /// Re-execute a finding or a raw trace.
    Replay(ReplayArgs),
    /// Shrink a finding's trace.
    Minimize(MinimizeArgs),
    /// Write a standalone C reproducer for a finding.
    EmitPoc(EmitArgs),
    /// Show which allocator checks a campaign triggered.
    Coverage(CoverageArgs),
    /// Quick end-to-end check of the installation.
    Selftest(SelftestArgs),
    /// Execution worker (internal).
    #[command(hide = true)]
    Worker(WorkerArgs),
}

#[derive(Args)]
struct SpecArg {
    /// Model spec file (`key = value` lines); defaults to everything enabled.
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl SpecArg {
    fn load(&self) -> Result<ModelSpec> {
        match &self.spec {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                Ok(ModelSpec::parse(&text)?)
            }
            None => Ok(ModelSpec::default()),
        }
    }
}

#[derive(Args)]
struct FuzzArgs {
    /// native, so:PATH, preload:PATH or bundled:NAME
    #[arg(long)]
    target: TargetSource,
    #[command(flatten)]
    spec: SpecArg,
    /// Wall-time budget, e.g. `10m`.
    #[arg(long, value_parser = humantime::parse_duration)]
    budget: Option<Duration>,
    /// Stop after this many executions.
    #[arg(long)]
    execs: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    /// Campaign seed in hex.
    #[arg(long, value_parser = parse_hex, default_value = "0")]
    seed: u64,
    #[arg(long, default_value = "heapscout-out")]
    out: PathBuf,
    /// Execute the files in this directory instead of generating inputs.
    #[arg(long)]
    input_dir: Option<PathBuf>,
    #[arg(long)]
    keep_duplicates: bool,
    /// Per-execution timeout.
    #[arg(long, value_parser = humantime::parse_duration, default_value = "2s")]
    timeout: Duration,
    /// Longest generated input in bytes.
    #[arg(long, default_value_t = DEFAULT_MAX_INPUT)]
    max_input: usize,
}

#[derive(Args)]
struct ReplayArgs {
    /// A finding directory, a report file, or a raw trace file.
    input: PathBuf,
    /// Overrides the target recorded in the report.
    #[arg(long)]
    target: Option<TargetSource>,
    /// Spec for raw traces (reports carry their own).
    #[command(flatten)]
    spec: SpecArg,
    /// Salt for raw traces.
    #[arg(long, default_value_t = 0)]
    salt: u64,
    /// Replay the minimized trace of a finding directory.
    #[arg(long)]
    minimized: bool,
    #[arg(long, value_parser = humantime::parse_duration, default_value = "2s")]
    timeout: Duration,
}

#[derive(Args)]
struct MinimizeArgs {
    /// A finding directory or report file.
    input: PathBuf,
    /// Directory for `min_report.txt` and `min_trace.bin`; defaults to the
    /// report's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmitArgs {
    /// A finding directory or report file.
    input: PathBuf,
    /// Trace to translate; defaults to `min_trace.bin` beside the report,
    /// else the report's own trace.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Compile and run the PoC.
    #[arg(long)]
    check: bool,
    /// Compiler command used by `--check`.
    #[arg(long, default_value = DEFAULT_CC)]
    cc: String,
}

#[derive(Args)]
struct CoverageArgs {
    /// Campaign output directory or an `aborts.txt` file.
    input: PathBuf,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value = "bundled:unsafe-unlink")]
    target: TargetSource,
}

#[derive(Args)]
struct WorkerArgs {
    #[arg(long)]
    target: String,
    /// Model spec in single-line form.
    #[arg(long)]
    model: String,
    #[arg(long, default_value_t = 2000)]
    timeout_ms: u64,
    /// Signal to raise after a finding (one-shot mode).
    #[arg(long, value_parser = parse_signal_arg)]
    finding_signal: Option<i32>,
    /// Run this input once instead of serving requests on stdin.
    #[arg(long, requires = "report")]
    input: Option<PathBuf>,
    /// Where a one-shot run writes its result record.
    #[arg(long, requires = "input")]
    report: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    salt: u64,
}

fn parse_signal_arg(s: &str) -> Result<i32, String> {
    parse_signal(s).ok_or_else(|| format!("unknown signal `{s}`"))
}

fn parse_hex(s: &str) -> Result<u64, String> {
    let digits = s.strip_prefix("0x").unwrap_or(s);
    u64::from_str_radix(digits, 16).map_err(|e| format!("bad hex seed `{s}`: {e}"))
}

fn worker_exe() -> Result<PathBuf> {
    std::env::current_exe().context("locating the heapscout executable")
}

fn spawn(target: &TargetSource, spec: &ModelSpec, timeout: Duration) -> Result<WorkerClient> {
    let config = WorkerConfig { timeout, ..WorkerConfig::new(target.clone(), spec.clone()) };
    WorkerClient::spawn(&worker_exe()?, &config).with_context(|| format!("starting a worker for {target}"))
}

fn report_path(input: &Path) -> PathBuf {
    if input.is_dir() {
        input.join("report.txt")
    } else {
        input.to_path_buf()
    }
}

fn load_report(input: &Path) -> Result<ImpactReport> {
    let path = report_path(input);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ImpactReport::parse(&text)?)
}

fn print_run(r: &RunResult) {
    println!("outcome={}", r.outcome.name());
    match &r.outcome {
        Outcome::Crash { message } => println!("message={message}"),
        Outcome::Finding => {
            if let Some(p) = r.primary() {
                println!("impact={}", p.class);
                println!("site={}", p.site.map_or("-", |s| s.name()));
                println!("action_index={}", p.action_index);
                println!("action={}", p.action);
            }
        }
        _ => {}
    }
    println!("progress={}", r.progress);
}

fn cmd_fuzz(args: FuzzArgs) -> Result<i32> {
    let spec = args.spec.load()?;
    if args.budget.is_none() && args.execs.is_none() && args.input_dir.is_none() {
        bail!("give --budget, --execs or --input-dir");
    }
    let mut config = CampaignConfig::new(args.target, spec, args.out, worker_exe()?);
    config.budget = args.budget;
    config.execs = args.execs;
    if let Some(w) = args.workers {
        config.workers = w;
    }
    config.seed = args.seed;
    config.input_dir = args.input_dir;
    config.keep_duplicates = args.keep_duplicates;
    config.timeout = args.timeout;
    config.max_input = args.max_input;
    let result = fuzz(&config)?;
    print!("{}", result.summary.to_text());
    for f in &result.findings {
        println!("finding {}", f.dir.display());
    }
    Ok(0)
}

fn cmd_replay(args: ReplayArgs) -> Result<i32> {
    let path = report_path(&args.input);
    let (target, spec, trace, salt) = match fs::read_to_string(&path).ok().and_then(|t| ImpactReport::parse(&t).ok()) {
        Some(report) => {
            let target = match args.target {
                Some(t) => t,
                None => report.target.parse()?,
            };
            let trace = if args.minimized {
                let min = path.with_file_name("min_trace.bin");
                fs::read(&min).with_context(|| format!("reading {}", min.display()))?
            } else {
                report.trace
            };
            (target, report.model, trace, report.salt)
        }
        None => {
            let target = args.target.context("raw traces need --target")?;
            let trace = fs::read(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
            (target, args.spec.load()?, trace, args.salt)
        }
    };
    let mut client = spawn(&target, &spec, args.timeout)?;
    let r = client.run(&trace, salt, false)?;
    print_run(&r);
    Ok(0)
}

fn cmd_minimize(args: MinimizeArgs) -> Result<i32> {
    let report = load_report(&args.input)?;
    let target: TargetSource = report.target.parse()?;
    let mut client = spawn(&target, &report.model, heapscout::sandbox::DEFAULT_TIMEOUT)?;
    let original = decode(&report.trace, &report.model);
    let m = {
        let mut oracle = WorkerOracle { client: &mut client, spec: &report.model, salt: report.salt };
        minimize(&original.actions, report.key(), &mut oracle)?
    };
    let bytes = encode(&m.actions, &report.model)?;
    let replay = client.run(&bytes, report.salt, false)?;
    let exec = replay.execution.context("minimized trace did not finish")?;
    let primary = exec.verdict.primary.context("minimized trace lost its impact")?;
    let min_report = ImpactReport {
        primary,
        events: exec.verdict.events.clone(),
        bug: exec.committed_bug,
        trace: bytes.clone(),
        ..report
    };
    let out = match args.out {
        Some(dir) => dir,
        None => report_path(&args.input).parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(&out)?;
    fs::write(out.join("min_report.txt"), min_report.to_text())?;
    fs::write(out.join("min_trace.bin"), &bytes)?;
    println!("actions {} -> {} ({} evaluations, {} passes)", original.len(), m.actions.len(), m.evaluations, m.passes);
    println!("wrote {}", out.join("min_report.txt").display());
    Ok(0)
}

fn cmd_emit(args: EmitArgs) -> Result<i32> {
    let mut report = load_report(&args.input)?;
    let beside = report_path(&args.input).with_file_name("min_trace.bin");
    match &args.trace {
        Some(path) => report.trace = fs::read(path).with_context(|| format!("reading {}", path.display()))?,
        None if beside.exists() => report.trace = fs::read(&beside)?,
        None => {}
    }
    let target: TargetSource = report.target.parse()?;
    let mut client = spawn(&target, &report.model, heapscout::sandbox::DEFAULT_TIMEOUT)?;
    let replay = client.run(&report.trace, report.salt, true)?;
    let Some(exec) = replay.execution else {
        bail!("stale finding: replay gave {}", replay.describe());
    };
    let poc = emit(&report, &exec)?;
    fs::create_dir_all(&args.out)?;
    let path = args.out.join(&poc.file_name);
    fs::write(&path, &poc.source)?;
    println!("wrote {}", path.display());
    if args.check {
        let dir = tempfile_dir()?;
        let status = compile_and_run(&poc.source, &target, &args.cc, &dir);
        let _ = fs::remove_dir_all(&dir);
        let status = status?;
        println!("poc exit status {status}");
        return Ok(if status == 0 { 0 } else { 1 });
    }
    Ok(0)
}

fn tempfile_dir() -> Result<PathBuf> {
    let dir = std::env::temp_dir().join(format!("heapscout-poc-{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn cmd_coverage(args: CoverageArgs) -> Result<i32> {
    let path = if args.input.is_dir() { args.input.join("aborts.txt") } else { args.input };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let tally = AbortTally::parse(&text);
    print!("{}", coverage_table(&tally));
    let unknown: Vec<_> = tally.rows().into_iter().filter(|r| r.1.is_none()).collect();
    for (n, _, m) in unknown {
        println!("unclassified {n}\t{m}");
    }
    Ok(0)
}

/// Scripted unlink: fake chunk inside chunk 0 pointing around its own
/// container entry, overflow into chunk 1's header, then free chunk 1.
fn unlink_actions(spec: &ModelSpec) -> Vec<Action> {
    let g = SizeGroup::new(1).expect("group 1 exists");
    let offset = (0..=u16::MAX).find(|o| SizePick::Group(g).size_at(*o) == 136).unwrap_or(0);
    let alloc = Action::Allocate { size: Value::plain(Strategy::GroupSize(SizePick::Group(g), offset)) };
    let write = |slot, value| Action::HeapWrite { chunk: 0, slot, value };
    let size_word = Value::linear(Strategy::ChunkSize(0), 1, -1);
    let actions = vec![
        alloc,
        alloc,
        write(1, size_word),
        write(2, Value::shifted(Strategy::ContainerAddr, -3)),
        write(3, Value::shifted(Strategy::ContainerAddr, -2)),
        write(15, size_word),
        Action::Bug(BugAction::Overflow { chunk: 0, words: 1, value: Value::linear(Strategy::ChunkSize(1), 1, 1) }),
        Action::Deallocate { chunk: 1 },
    ];
    debug_assert!(encode(&actions, spec).is_ok());
    actions
}

fn cmd_selftest(args: SelftestArgs) -> Result<i32> {
    let spec = ModelSpec::default();
    let mut client = spawn(&args.target, &spec, heapscout::sandbox::DEFAULT_TIMEOUT)?;
    let mut failed = 0;
    let mut step = |name: &str, ok: bool, detail: String| {
        println!("{} {name}: {detail}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            failed += 1;
        }
    };
    let empty = client.run(&[], 0, false)?;
    step("empty trace", empty.outcome == Outcome::NoImpact, empty.describe());
    let plain: Vec<Action> = unlink_actions(&spec).into_iter().filter(|a| a.bug().is_none()).collect();
    let r = client.run(&encode(&plain, &spec)?, 0, false)?;
    step("bug-free trace", r.outcome == Outcome::NoImpact, r.describe());
    let r = client.run(&encode(&unlink_actions(&spec), &spec)?, 0, false)?;
    let ok = matches!(r.outcome, Outcome::Finding | Outcome::Crash { .. });
    step("scripted unlink", ok, r.describe());
    Ok(if failed == 0 { 0 } else { 1 })
}

fn worker(args: WorkerArgs) -> Result<i32> {
    let config = WorkerConfig {
        target: args.target.parse::<TargetSource>()?,
        spec: ModelSpec::from_compact(&args.model)?,
        timeout: Duration::from_millis(args.timeout_ms),
        finding_signal: args.finding_signal,
    };
    if let (Some(input), Some(report)) = (&args.input, &args.report) {
        return Ok(run_one_shot(&config, input, report, args.salt)?);
    }
    let mut server = ForkServer::new(&config).context("starting worker")?;
    let stdin = std::io::stdin().lock();
    let stdout = std::io::stdout().lock();
    server.serve(stdin, stdout)?;
    Ok(0)
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fuzz(args) => cmd_fuzz(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Minimize(args) => cmd_minimize(args),
        Command::EmitPoc(args) => cmd_emit(args),
        Command::Coverage(args) => cmd_coverage(args),
        Command::Selftest(args) => cmd_selftest(args),
        Command::Worker(args) => worker(args),
    };
    match result {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("heapscout: {e:#}");
            std::process::exit(2);
        }
    }
}
