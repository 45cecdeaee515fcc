//! Fuzzing campaigns: input generation, worker threads, findings on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aborts::AbortTally;
use crate::codec::{decode, encode};
use crate::error::{CampaignError, WorkerError};
use crate::minimizer::{minimize, WorkerOracle};
use crate::model::{ImpactClass, ModelSpec};
use crate::poc::{emit, trace_hash};
use crate::report::ImpactReport;
use crate::sandbox::{Outcome, RunResult, WorkerClient, WorkerConfig, DEFAULT_TIMEOUT};
use crate::target::TargetSource;

/// Upper bound on generated input length in bytes.
pub const DEFAULT_MAX_INPUT: usize = 1024;

/// Early exit condition, checked after every execution.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StopWhen {
    #[default]
    Budget,
    /// A finding whose primary class is in `classes` and, if `max_actions`
    /// is set, whose minimized trace is at most that long.
    Impact { classes: BTreeSet<ImpactClass>, max_actions: Option<usize> },
    /// This many distinct catalog checks were hit.
    Checks(usize),
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub target: TargetSource,
    pub spec: ModelSpec,
    pub out: PathBuf,
    pub worker_exe: PathBuf,
    pub budget: Option<Duration>,
    pub execs: Option<u64>,
    pub workers: usize,
    pub seed: u64,
    pub input_dir: Option<PathBuf>,
    pub keep_duplicates: bool,
    pub timeout: Duration,
    pub max_input: usize,
    pub stop: StopWhen,
}

impl CampaignConfig {
    pub fn new(target: TargetSource, spec: ModelSpec, out: PathBuf, worker_exe: PathBuf) -> Self {
        CampaignConfig {
            target,
            spec,
            out,
            worker_exe,
            budget: None,
            execs: None,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            seed: 0,
            input_dir: None,
            keep_duplicates: false,
            timeout: DEFAULT_TIMEOUT,
            max_input: DEFAULT_MAX_INPUT,
            stop: StopWhen::Budget,
        }
    }

    fn worker_config(&self) -> WorkerConfig {
        WorkerConfig { timeout: self.timeout, ..WorkerConfig::new(self.target.clone(), self.spec.clone()) }
    }
}

/// A finding persisted under `findings/`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FindingRecord {
    pub dir: PathBuf,
    pub dedup_key: String,
    pub report: ImpactReport,
    pub original_len: usize,
    /// Length of the minimized trace, if minimization succeeded.
    pub minimized_len: Option<usize>,
    pub poc: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Summary {
    pub executions: u64,
    pub findings: u64,
    pub no_impact: u64,
    pub crashes: u64,
    pub timeouts: u64,
    /// Crash prefixes re-run to recover events (included in `executions`).
    pub salvage_runs: u64,
    /// Finding runs per primary class.
    pub per_class: BTreeMap<ImpactClass, u64>,
    pub unique: BTreeSet<String>,
    pub minimize_failures: u64,
    pub aborts: AbortTally,
    pub elapsed: Duration,
}

impl Summary {
    fn count(&mut self, r: &RunResult) {
        self.executions += 1;
        match &r.outcome {
            Outcome::NoImpact => self.no_impact += 1,
            Outcome::Finding => {
                self.findings += 1;
                if let Some(p) = r.primary() {
                    *self.per_class.entry(p.class).or_default() += 1;
                }
            }
            Outcome::Crash { message } => {
                self.crashes += 1;
                self.aborts.record(message);
            }
            Outcome::Timeout => self.timeouts += 1,
        }
    }

    /// Everything except timing.
    pub fn counters_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "executions={}", self.executions);
        let _ = writeln!(out, "findings={}", self.findings);
        let _ = writeln!(out, "no_impact={}", self.no_impact);
        let _ = writeln!(out, "crashes={}", self.crashes);
        let _ = writeln!(out, "timeouts={}", self.timeouts);
        let _ = writeln!(out, "salvage_runs={}", self.salvage_runs);
        for class in ImpactClass::ALL {
            let _ = writeln!(out, "findings_{class}={}", self.per_class.get(&class).copied().unwrap_or(0));
        }
        let _ = writeln!(out, "unique_findings={}", self.unique.len());
        let _ = writeln!(out, "minimize_failures={}", self.minimize_failures);
        let covered = self.aborts.covered();
        let _ = writeln!(out, "checks_covered={}", covered.join(","));
        for (n, id, _) in self.aborts.rows() {
            if let Some(id) = id {
                let _ = writeln!(out, "aborts_{id}={n}");
            }
        }
        let unclassified: u64 = self.aborts.rows().iter().filter(|r| r.1.is_none()).map(|r| r.0).sum();
        let _ = writeln!(out, "aborts_unclassified={unclassified}");
        out
    }

    pub fn to_text(&self) -> String {
        let secs = self.elapsed.as_secs_f64();
        let mut out = self.counters_text();
        let _ = writeln!(out, "elapsed_secs={secs:.1}");
        let rate = if secs > 0.0 { self.executions as f64 / secs } else { 0.0 };
        let _ = writeln!(out, "execs_per_sec={rate:.1}");
        out
    }
}

#[derive(Debug)]
pub struct CampaignResult {
    pub summary: Summary,
    pub findings: Vec<FindingRecord>,
}

struct Shared<'a> {
    config: &'a CampaignConfig,
    start: Instant,
    execs: AtomicU64,
    next_input: AtomicUsize,
    inputs: Vec<PathBuf>,
    stop: AtomicBool,
    state: Mutex<State>,
    dir_counter: AtomicU64,
}

#[derive(Default)]
struct State {
    summary: Summary,
    findings: Vec<FindingRecord>,
    seen: BTreeSet<String>,
}

enum Input {
    Bytes(Vec<u8>, u64),
    Done,
}

impl Shared<'_> {
    fn out_of_budget(&self) -> bool {
        self.stop.load(Ordering::Relaxed) || self.config.budget.is_some_and(|b| self.start.elapsed() >= b)
    }

    /// Reserves one execution against `--execs`.
    fn claim(&self) -> bool {
        match self.config.execs {
            Some(max) => self.execs.fetch_add(1, Ordering::Relaxed) < max,
            None => true,
        }
    }

    fn next(&self, rng: &mut ChaCha8Rng) -> Input {
        if self.out_of_budget() {
            return Input::Done;
        }
        if self.config.input_dir.is_some() {
            let i = self.next_input.fetch_add(1, Ordering::Relaxed);
            let Some(path) = self.inputs.get(i) else {
                return Input::Done;
            };
            if !self.claim() {
                return Input::Done;
            }
            return match fs::read(path) {
                Ok(bytes) => Input::Bytes(bytes, self.config.seed.wrapping_add(i as u64)),
                Err(e) => {
                    log::warn!("skipping {}: {e}", path.display());
                    self.next(rng)
                }
            };
        }
        if !self.claim() {
            return Input::Done;
        }
        let len = rng.gen_range(1..=self.config.max_input.max(1));
        let mut bytes = vec![0u8; len];
        rng.fill(&mut bytes[..]);
        Input::Bytes(bytes, rng.gen())
    }

    fn check_stop(&self, state: &State) {
        let hit = match &self.config.stop {
            StopWhen::Budget => false,
            StopWhen::Impact { classes, max_actions } => state.findings.iter().any(|f| {
                classes.contains(&f.report.primary.class)
                    && max_actions.is_none_or(|m| f.minimized_len.is_some_and(|l| l <= m))
            }),
            StopWhen::Checks(n) => state.summary.aborts.covered().len() >= *n,
        };
        if hit {
            self.stop.store(true, Ordering::Relaxed);
        }
    }
}

fn list_inputs(dir: &Path) -> Result<Vec<PathBuf>, CampaignError> {
    let mut inputs: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(Result::ok)
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    inputs.sort();
    Ok(inputs)
}

/// Runs a campaign and writes `findings/`, `aborts.txt` and `summary.txt`
/// under the output directory.
pub fn fuzz(config: &CampaignConfig) -> Result<CampaignResult, CampaignError> {
    fs::create_dir_all(config.out.join("findings"))?;
    let inputs = match &config.input_dir {
        Some(dir) => list_inputs(dir)?,
        None => Vec::new(),
    };
    let shared = Shared {
        config,
        start: Instant::now(),
        execs: AtomicU64::new(0),
        next_input: AtomicUsize::new(0),
        inputs,
        stop: AtomicBool::new(false),
        state: Mutex::new(State::default()),
        dir_counter: AtomicU64::new(0),
    };
    let workers = config.workers.max(1);
    let errors: Vec<WorkerError> = std::thread::scope(|s| {
        let shared = &shared;
        let handles: Vec<_> = (0..workers).map(|w| s.spawn(move || worker_loop(shared, w as u64))).collect();
        handles.into_iter().filter_map(|h| h.join().expect("campaign worker panicked").err()).collect()
    });
    let mut state = shared.state.into_inner().expect("campaign state poisoned");
    state.summary.elapsed = shared.start.elapsed();
    if let Some(e) = errors.into_iter().next() {
        if state.summary.executions == 0 {
            return Err(e.into());
        }
        log::warn!("a campaign worker stopped early: {e}");
    }
    fs::write(config.out.join("aborts.txt"), state.summary.aborts.to_text())?;
    fs::write(config.out.join("summary.txt"), state.summary.to_text())?;
    if state.summary.executions == 0 {
        return Err(CampaignError::NoExecutions);
    }
    state.findings.sort_by(|a, b| a.dir.cmp(&b.dir));
    Ok(CampaignResult { summary: state.summary, findings: state.findings })
}

fn worker_loop(shared: &Shared<'_>, index: u64) -> Result<(), WorkerError> {
    let config = shared.config;
    let mut client = WorkerClient::spawn(&config.worker_exe, &config.worker_config())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(index);
    let mut last_note = Instant::now();
    while let Input::Bytes(bytes, salt) = shared.next(&mut rng) {
        let r = client.run(&bytes, salt, false)?;
        let mut salvage = None;
        if let Outcome::Crash { .. } = r.outcome {
            if r.progress > 1 && r.events.iter().any(|e| config.spec.impacts.contains(&e.class)) {
                salvage = Some(decode(&bytes, &config.spec).prefix_bytes(r.progress - 1).to_vec());
            }
        }
        let finding = matches!(r.outcome, Outcome::Finding).then(|| bytes.clone());
        shared.state.lock().expect("campaign state poisoned").summary.count(&r);
        if let Some(trace) = finding {
            handle_finding(shared, &mut client, &r, trace, salt)?;
        }
        if let Some(prefix) = salvage {
            let r = client.run(&prefix, salt, false)?;
            {
                let mut state = shared.state.lock().expect("campaign state poisoned");
                state.summary.count(&r);
                state.summary.salvage_runs += 1;
            }
            if r.outcome == Outcome::Finding {
                handle_finding(shared, &mut client, &r, prefix, salt)?;
            }
        }
        shared.check_stop(&shared.state.lock().expect("campaign state poisoned"));
        if index == 0 && last_note.elapsed() > Duration::from_secs(10) {
            last_note = Instant::now();
            let s = &shared.state.lock().expect("campaign state poisoned").summary;
            log::info!("{} execs, {} findings, {} unique, {} crashes", s.executions, s.findings, s.unique.len(), s.crashes);
        }
    }
    Ok(())
}

fn handle_finding(
    shared: &Shared<'_>,
    client: &mut WorkerClient,
    run: &RunResult,
    trace: Vec<u8>,
    salt: u64,
) -> Result<(), WorkerError> {
    let config = shared.config;
    let Some(exec) = &run.execution else {
        return Ok(());
    };
    let Some(primary) = exec.verdict.primary else {
        return Ok(());
    };
    let report = ImpactReport::new(
        primary,
        exec.verdict.events.clone(),
        exec.committed_bug,
        trace,
        salt,
        config.target.to_string(),
        config.spec.clone(),
    );
    let key = report.dedup_key();
    let fresh = shared.state.lock().expect("campaign state poisoned").seen.insert(key.clone());
    if !fresh && !config.keep_duplicates {
        return Ok(());
    }
    let name = if fresh { key.clone() } else { format!("{key}~{}", trace_hash(&report.trace)) };
    let original = decode(&report.trace, &config.spec);
    let mut min_trace = None;
    let mut poc = None;
    if fresh {
        let mut oracle = WorkerOracle { client, spec: &config.spec, salt };
        match minimize(&original.actions, report.key(), &mut oracle) {
            Ok(m) => {
                let bytes = encode(&m.actions, &config.spec).expect("decoded actions re-encode");
                let replay = client.run(&bytes, salt, true)?;
                if let Some(exec) = replay.execution {
                    let min_report = ImpactReport { trace: bytes.clone(), ..report.clone() };
                    match emit(&min_report, &exec) {
                        Ok(p) => poc = Some(p.source),
                        Err(e) => log::warn!("{key}: no poc: {e}"),
                    }
                }
                min_trace = Some(bytes);
            }
            Err(e) => {
                log::warn!("{key}: minimization failed: {e}");
                shared.state.lock().expect("campaign state poisoned").summary.minimize_failures += 1;
            }
        }
    }
    let dir = config.out.join("findings").join(&name);
    let tmp = config.out.join("findings").join(format!(
        ".tmp-{}-{}",
        std::process::id(),
        shared.dir_counter.fetch_add(1, Ordering::Relaxed)
    ));
    let written = (|| -> std::io::Result<()> {
        fs::create_dir_all(&tmp)?;
        fs::write(tmp.join("report.txt"), report.to_text())?;
        fs::write(tmp.join("trace.bin"), &report.trace)?;
        if let Some(m) = &min_trace {
            fs::write(tmp.join("min_trace.bin"), m)?;
        }
        if let Some(src) = &poc {
            fs::write(tmp.join("poc.c"), src)?;
        }
        fs::rename(&tmp, &dir)
    })();
    if let Err(e) = written {
        let _ = fs::remove_dir_all(&tmp);
        log::warn!("{name}: not persisted: {e}");
        return Ok(());
    }
    let record = FindingRecord {
        dir,
        dedup_key: key.clone(),
        original_len: original.len(),
        minimized_len: min_trace.as_ref().map(|m| decode(m, &config.spec).len()),
        poc: poc.is_some(),
        report,
    };
    let mut state = shared.state.lock().expect("campaign state poisoned");
    state.summary.unique.insert(key);
    state.findings.push(record);
    Ok(())
}

/// Reads a finding directory back.
pub fn load_finding(dir: &Path) -> Result<(ImpactReport, Option<Vec<u8>>), CampaignError> {
    let report = ImpactReport::parse(&fs::read_to_string(dir.join("report.txt"))?)?;
    let min = fs::read(dir.join("min_trace.bin")).ok();
    Ok((report, min))
}
