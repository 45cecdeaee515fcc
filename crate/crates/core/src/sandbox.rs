//! Process isolation for executions.
//!
//! A worker process loads the target once and then forks one child per
//! execution, so every run starts from the same pristine heap. The child
//! streams progress and impact events into a shared page while it runs,
//! stores its final result there, and `_exit`s with a code that names the
//! outcome. Anything else (abort, trap, segfault) is a crash; `SIGALRM` from
//! the child's interval timer is a timeout. Child stdout and stderr go to a
//! memfd, whose last line becomes the crash message.
//!
//! Requests and responses between [`WorkerClient`] and the worker are JSON
//! lines on the worker's stdin and stdout.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::os::fd::{AsRawFd, FromRawFd, OwnedFd};
use std::path::{Path, PathBuf};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::codec::{decode, CODEC_VERSION};
use crate::detector::ImpactEvent;
use crate::engine::{execute, Execution, Observer};
use crate::error::WorkerError;
use crate::model::{ActionKind, BugKind, ImpactClass, ModelSpec, Site};
use crate::target::{AllocatorTarget, TargetSource};

pub const EXIT_NO_IMPACT: i32 = 0;
pub const EXIT_FINDING: i32 = 10;
pub const EXIT_CRASH: i32 = 11;
pub const EXIT_TIMEOUT: i32 = 12;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(2);

const SHM_SIZE: usize = 1 << 21;
const MAX_STREAMED_EVENTS: usize = 64;
const HEADER_WORDS: usize = 4;
const EVENT_BYTES: usize = 16;
const RESULT_OFFSET: usize = HEADER_WORDS * 8 + MAX_STREAMED_EVENTS * EVENT_BYTES;

/// Outcome class of one execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    NoImpact,
    Finding,
    Crash { message: String },
    Timeout,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        match self {
            Outcome::NoImpact => EXIT_NO_IMPACT,
            Outcome::Finding => EXIT_FINDING,
            Outcome::Crash { .. } => EXIT_CRASH,
            Outcome::Timeout => EXIT_TIMEOUT,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Outcome::NoImpact => "no-impact",
            Outcome::Finding => "finding",
            Outcome::Crash { .. } => "crash",
            Outcome::Timeout => "timeout",
        }
    }
}

/// Everything the orchestrator learns from one execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunResult {
    pub outcome: Outcome,
    /// Number of actions started before the run ended.
    pub progress: usize,
    /// Events streamed before the run ended (complete for finished runs).
    pub events: Vec<ImpactEvent>,
    /// Present when the child finished normally.
    pub execution: Option<Execution>,
}

impl RunResult {
    pub fn primary(&self) -> Option<ImpactEvent> {
        self.execution.as_ref().and_then(|e| e.verdict.primary)
    }

    /// `impact/site` or the outcome name, for messages.
    pub fn describe(&self) -> String {
        match (&self.outcome, self.primary()) {
            (Outcome::Finding, Some(p)) => {
                format!("{}/{}", p.class, p.site.map_or("-", Site::name))
            }
            (Outcome::Crash { message }, _) => format!("crash ({message})"),
            (o, _) => o.name().to_string(),
        }
    }
}

/// How a worker process is set up.
#[derive(Debug, Clone)]
pub struct WorkerConfig {
    pub target: TargetSource,
    pub spec: ModelSpec,
    pub timeout: Duration,
    /// Signal raised by a one-shot worker after a finding.
    pub finding_signal: Option<i32>,
}

impl WorkerConfig {
    pub fn new(target: TargetSource, spec: ModelSpec) -> Self {
        WorkerConfig { target, spec, timeout: DEFAULT_TIMEOUT, finding_signal: None }
    }

    /// Arguments after the `worker` subcommand.
    pub fn to_args(&self) -> Vec<String> {
        let mut args = vec![
            "--target".to_string(),
            self.target.to_string(),
            "--model".to_string(),
            self.spec.to_compact(),
            "--timeout-ms".to_string(),
            self.timeout.as_millis().to_string(),
        ];
        if let Some(sig) = self.finding_signal {
            args.push("--finding-signal".to_string());
            args.push(sig.to_string());
        }
        args
    }

    /// Environment for the worker process.
    pub fn env(&self) -> Vec<(String, String)> {
        let mut env = vec![("LIBC_FATAL_STDERR_".to_string(), "1".to_string())];
        if let Some(lib) = self.target.preload() {
            let abs = lib.canonicalize().unwrap_or_else(|_| lib.to_path_buf());
            env.push(("LD_PRELOAD".to_string(), abs.display().to_string()));
        }
        env
    }
}

struct SharedPage {
    base: *mut u8,
}

impl SharedPage {
    fn new() -> std::io::Result<Self> {
        // SAFETY: anonymous shared mapping, owned by this struct.
        let p = unsafe {
            libc::mmap(
                std::ptr::null_mut(),
                SHM_SIZE,
                libc::PROT_READ | libc::PROT_WRITE,
                libc::MAP_SHARED | libc::MAP_ANONYMOUS,
                -1,
                0,
            )
        };
        if p == libc::MAP_FAILED {
            return Err(std::io::Error::last_os_error());
        }
        Ok(SharedPage { base: p.cast() })
    }

    fn word(&self, i: usize) -> u64 {
        // SAFETY: i < HEADER_WORDS.
        unsafe { std::ptr::read_volatile((self.base as *const u64).add(i)) }
    }

    fn set_word(&self, i: usize, v: u64) {
        // SAFETY: i < HEADER_WORDS.
        unsafe { std::ptr::write_volatile((self.base as *mut u64).add(i), v) }
    }

    fn slice(&self, offset: usize, len: usize) -> &[u8] {
        // SAFETY: callers keep offset + len within SHM_SIZE.
        unsafe { std::slice::from_raw_parts(self.base.add(offset), len) }
    }

    fn write(&self, offset: usize, bytes: &[u8]) {
        // SAFETY: callers keep offset + len within SHM_SIZE.
        unsafe { std::ptr::copy_nonoverlapping(bytes.as_ptr(), self.base.add(offset), bytes.len()) }
    }

    fn reset(&self) {
        for i in 0..HEADER_WORDS {
            self.set_word(i, 0);
        }
    }
}

impl Drop for SharedPage {
    fn drop(&mut self) {
        // SAFETY: unmapping our own mapping.
        unsafe { libc::munmap(self.base.cast(), SHM_SIZE) };
    }
}

// Header words.
const H_PROGRESS: usize = 0;
const H_EVENTS: usize = 1;
const H_RESULT_LEN: usize = 2;

fn pack_event(e: &ImpactEvent) -> [u8; EVENT_BYTES] {
    let mut b = [0u8; EVENT_BYTES];
    b[0] = ImpactClass::ALL.iter().position(|c| *c == e.class).unwrap() as u8;
    b[1] = match e.site {
        None => 0,
        Some(Site::Container) => 1,
        Some(Site::Buffer) => 2,
    };
    b[2] = ActionKind::ALL.iter().position(|a| *a == e.action).unwrap() as u8;
    b[3] = e.bug.map_or(0, |k| 1 + BugKind::ALL.iter().position(|x| *x == k).unwrap() as u8);
    b[8..].copy_from_slice(&(e.action_index as u64).to_le_bytes());
    b
}

fn unpack_event(b: &[u8]) -> Option<ImpactEvent> {
    Some(ImpactEvent {
        class: *ImpactClass::ALL.get(b[0] as usize)?,
        site: match b[1] {
            0 => None,
            1 => Some(Site::Container),
            _ => Some(Site::Buffer),
        },
        action: *ActionKind::ALL.get(b[2] as usize)?,
        bug: match b[3] {
            0 => None,
            k => Some(*BugKind::ALL.get(k as usize - 1)?),
        },
        action_index: u64::from_le_bytes(b[8..16].try_into().ok()?) as usize,
    })
}

struct StreamObserver<'a> {
    shm: &'a SharedPage,
}

impl Observer for StreamObserver<'_> {
    fn on_action_start(&mut self, index: usize) {
        self.shm.set_word(H_PROGRESS, index as u64 + 1);
    }

    fn on_event(&mut self, event: &ImpactEvent) {
        let n = self.shm.word(H_EVENTS) as usize;
        if n < MAX_STREAMED_EVENTS {
            self.shm.write(HEADER_WORDS * 8 + n * EVENT_BYTES, &pack_event(event));
            self.shm.set_word(H_EVENTS, n as u64 + 1);
        }
    }
}

fn memfd() -> std::io::Result<OwnedFd> {
    // SAFETY: plain syscall with a static name.
    let fd = unsafe { libc::memfd_create(c"heapscout-stderr".as_ptr(), libc::MFD_CLOEXEC) };
    if fd < 0 {
        return Err(std::io::Error::last_os_error());
    }
    // SAFETY: fd is a fresh descriptor we own.
    Ok(unsafe { OwnedFd::from_raw_fd(fd) })
}

/// The in-worker half: target loaded once, one fork per execution.
pub struct ForkServer {
    target: AllocatorTarget,
    spec: ModelSpec,
    timeout: Duration,
    shm: SharedPage,
    output: OwnedFd,
}

impl ForkServer {
    pub fn new(config: &WorkerConfig) -> Result<Self, WorkerError> {
        Ok(ForkServer {
            target: AllocatorTarget::load(&config.target)?,
            spec: config.spec.clone(),
            timeout: config.timeout,
            shm: SharedPage::new()?,
            output: memfd()?,
        })
    }

    /// Executes one trace in a fresh child.
    pub fn run(&mut self, trace: &[u8], salt: u64, want_log: bool) -> Result<RunResult, WorkerError> {
        self.shm.reset();
        let out = self.output.as_raw_fd();
        // SAFETY: truncating our own memfd.
        unsafe {
            libc::ftruncate(out, 0);
            libc::lseek(out, 0, libc::SEEK_SET);
        }
        // SAFETY: the worker is single threaded, so the child may keep
        // running Rust code after fork.
        let pid = unsafe { libc::fork() };
        if pid < 0 {
            return Err(std::io::Error::last_os_error().into());
        }
        if pid == 0 {
            self.child(trace, salt, want_log);
        }
        let mut status = 0;
        loop {
            // SAFETY: waiting for our own child.
            let r = unsafe { libc::waitpid(pid, &mut status, 0) };
            if r == pid {
                break;
            }
            let err = std::io::Error::last_os_error();
            if err.kind() != std::io::ErrorKind::Interrupted {
                return Err(err.into());
            }
        }
        Ok(self.collect(status))
    }

    fn child(&mut self, trace: &[u8], salt: u64, want_log: bool) -> ! {
        let out = self.output.as_raw_fd();
        // SAFETY: the child redirects its own stdio and arms its own timer.
        unsafe {
            libc::dup2(out, 1);
            libc::dup2(out, 2);
            libc::signal(libc::SIGALRM, libc::SIG_DFL);
            let us = self.timeout.as_micros().max(1) as i64;
            let timer = libc::itimerval {
                it_interval: libc::timeval { tv_sec: 0, tv_usec: 0 },
                it_value: libc::timeval { tv_sec: us / 1_000_000, tv_usec: us % 1_000_000 },
            };
            libc::setitimer(libc::ITIMER_REAL, &timer, std::ptr::null_mut());
        }
        let program = decode(trace, &self.spec);
        let mut observer = StreamObserver { shm: &self.shm };
        let mut execution = execute(&program, &mut self.target, &self.spec, salt, &mut observer);
        if !want_log {
            execution.log.clear();
        }
        let code = if execution.verdict.is_finding() { EXIT_FINDING } else { EXIT_NO_IMPACT };
        match serde_json::to_vec(&execution) {
            Ok(bytes) if RESULT_OFFSET + bytes.len() <= SHM_SIZE => {
                self.shm.write(RESULT_OFFSET, &bytes);
                self.shm.set_word(H_RESULT_LEN, bytes.len() as u64);
            }
            _ => {}
        }
        // SAFETY: skip destructors and atexit handlers; the heap may be
        // corrupted.
        unsafe { libc::_exit(code) }
    }

    fn captured_output(&self) -> String {
        let mut file = fs::File::from(self.output.try_clone().expect("dup memfd"));
        let mut text = Vec::new();
        use std::io::{Read, Seek, SeekFrom};
        let _ = file.seek(SeekFrom::Start(0));
        let _ = file.take(1 << 16).read_to_end(&mut text);
        String::from_utf8_lossy(&text).into_owned()
    }

    fn collect(&self, status: i32) -> RunResult {
        let progress = self.shm.word(H_PROGRESS) as usize;
        let n = (self.shm.word(H_EVENTS) as usize).min(MAX_STREAMED_EVENTS);
        let events: Vec<ImpactEvent> = (0..n)
            .filter_map(|i| unpack_event(self.shm.slice(HEADER_WORDS * 8 + i * EVENT_BYTES, EVENT_BYTES)))
            .collect();
        let result_len = self.shm.word(H_RESULT_LEN) as usize;
        let execution = (result_len > 0)
            .then(|| serde_json::from_slice::<Execution>(self.shm.slice(RESULT_OFFSET, result_len)).ok())
            .flatten();
        let outcome = if libc::WIFEXITED(status) {
            match (libc::WEXITSTATUS(status), &execution) {
                (EXIT_NO_IMPACT, Some(_)) => Outcome::NoImpact,
                (EXIT_FINDING, Some(_)) => Outcome::Finding,
                (code, _) => Outcome::Crash { message: self.crash_message(&format!("exit status {code}")) },
            }
        } else if libc::WIFSIGNALED(status) && libc::WTERMSIG(status) == libc::SIGALRM {
            Outcome::Timeout
        } else {
            let sig = libc::WTERMSIG(status);
            Outcome::Crash { message: self.crash_message(&signal_name(sig)) }
        };
        let execution = match outcome {
            Outcome::NoImpact | Outcome::Finding => execution,
            _ => None,
        };
        RunResult { outcome, progress, events, execution }
    }

    fn crash_message(&self, fallback: &str) -> String {
        self.captured_output()
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map_or_else(|| fallback.to_string(), str::to_string)
    }

    /// Answers JSON-line requests until `input` closes.
    pub fn serve(&mut self, input: impl BufRead, mut output: impl Write) -> Result<(), WorkerError> {
        for line in input.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let req: Request = serde_json::from_str(&line).map_err(|e| WorkerError::Protocol(e.to_string()))?;
            let trace = hex::decode(&req.trace).map_err(|e| WorkerError::Protocol(e.to_string()))?;
            let result = self.run(&trace, req.salt, req.log)?;
            let mut bytes = serde_json::to_vec(&result).map_err(|e| WorkerError::Protocol(e.to_string()))?;
            bytes.push(b'\n');
            output.write_all(&bytes)?;
            output.flush()?;
        }
        Ok(())
    }
}

fn signal_name(sig: i32) -> String {
    // SAFETY: strsignal returns a static or thread-local string.
    let p = unsafe { libc::strsignal(sig) };
    if p.is_null() {
        return format!("signal {sig}");
    }
    // SAFETY: non-null NUL-terminated string.
    let name = unsafe { std::ffi::CStr::from_ptr(p) }.to_string_lossy().into_owned();
    format!("signal {sig} ({name})")
}

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    salt: u64,
    trace: String,
    log: bool,
}

/// Record written by a one-shot worker.
#[derive(Debug, Serialize, Deserialize)]
pub struct OneShotRecord {
    pub outcome: Outcome,
    pub impact: Option<ImpactClass>,
    pub site: Option<Site>,
    pub salt: u64,
    pub codec_version: String,
    pub result: RunResult,
}

/// Runs one input file, writes `report`, and returns the process exit code.
/// Raises the configured signal on findings after the report is written.
pub fn run_one_shot(config: &WorkerConfig, input: &Path, report: &Path, salt: u64) -> Result<i32, WorkerError> {
    let trace = fs::read(input)?;
    let mut server = ForkServer::new(config)?;
    let result = server.run(&trace, salt, true)?;
    let primary = result.primary();
    let record = OneShotRecord {
        outcome: result.outcome.clone(),
        impact: primary.map(|p| p.class),
        site: primary.and_then(|p| p.site),
        salt,
        codec_version: CODEC_VERSION.to_string(),
        result,
    };
    let json = serde_json::to_string_pretty(&record).map_err(|e| WorkerError::Protocol(e.to_string()))?;
    fs::write(report, json)?;
    if record.outcome == Outcome::Finding {
        if let Some(sig) = config.finding_signal {
            // SAFETY: raising a signal at ourselves.
            unsafe { libc::raise(sig) };
        }
    }
    Ok(record.outcome.exit_code())
}

/// Orchestrator-side handle on a worker process.
pub struct WorkerClient {
    exe: PathBuf,
    config: WorkerConfig,
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl WorkerClient {
    /// Starts `exe worker <config>` (`exe` is the heapscout binary).
    pub fn spawn(exe: &Path, config: &WorkerConfig) -> Result<Self, WorkerError> {
        let mut child = Command::new(exe)
            .arg("worker")
            .args(config.to_args())
            .envs(config.env())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(WorkerClient { exe: exe.to_path_buf(), config: config.clone(), child, stdin, stdout })
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    pub fn run(&mut self, trace: &[u8], salt: u64, want_log: bool) -> Result<RunResult, WorkerError> {
        match self.try_run(trace, salt, want_log) {
            Ok(r) => Ok(r),
            Err(WorkerError::Io(_)) | Err(WorkerError::Protocol(_)) => {
                log::warn!("worker for {} died, restarting", self.config.target);
                *self = WorkerClient::spawn(&self.exe, &self.config)?;
                self.try_run(trace, salt, want_log)
            }
            Err(e) => Err(e),
        }
    }

    fn try_run(&mut self, trace: &[u8], salt: u64, want_log: bool) -> Result<RunResult, WorkerError> {
        let req = Request { salt, trace: hex::encode(trace), log: want_log };
        let mut line = serde_json::to_vec(&req).map_err(|e| WorkerError::Protocol(e.to_string()))?;
        line.push(b'\n');
        self.stdin.write_all(&line)?;
        self.stdin.flush()?;
        let mut response = String::new();
        if self.stdout.read_line(&mut response)? == 0 {
            let status = self.child.try_wait().ok().flatten();
            return Err(WorkerError::Protocol(format!("worker exited ({status:?})")));
        }
        serde_json::from_str(&response).map_err(|e| WorkerError::Protocol(e.to_string()))
    }
}

impl Drop for WorkerClient {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Resolves a signal given by number or name (`USR2`, `SIGUSR2`).
pub fn parse_signal(s: &str) -> Option<i32> {
    if let Ok(n) = s.parse() {
        return Some(n);
    }
    let name = s.trim_start_matches("SIG").to_ascii_uppercase();
    let known = [
        ("USR1", libc::SIGUSR1),
        ("USR2", libc::SIGUSR2),
        ("ABRT", libc::SIGABRT),
        ("SEGV", libc::SIGSEGV),
        ("TRAP", libc::SIGTRAP),
        ("KILL", libc::SIGKILL),
    ];
    known.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
}
