//! Standalone C reproducers.
//!
//! A PoC replays the logged actions of a finding against the same allocator
//! with a plain array as the container and exits 0 iff the reported impact
//! shows up at the reported action.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::time::{Duration, Instant};

use sha2::{Digest, Sha256};

use crate::codec::{Action, BugAction, Strategy, Transform, Value, BUFFER_SIZE, CONSTANTS, WORD};
use crate::detector::ImpactEvent;
use crate::engine::{Execution, LogEntry, Skip, MAX_RECORDS};
use crate::error::PocError;
use crate::model::{ImpactClass, Knowledge, Site};
use crate::report::ImpactReport;
use crate::target::TargetSource;

pub const DEFAULT_CC: &str = "cc -std=c11 -Wall -Wextra -Werror -pedantic";
pub const RUN_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Poc {
    pub file_name: String,
    pub source: String,
    /// Event the program checks for.
    pub expect: ImpactEvent,
}

/// First 16 hex digits of the trace's SHA-256.
pub fn trace_hash(trace: &[u8]) -> String {
    let digest = Sha256::digest(trace);
    hex::encode(&digest[..8])
}

/// Linker arguments for a target.
pub fn link_args(target: &TargetSource) -> Vec<String> {
    match target {
        TargetSource::SharedObject(_) | TargetSource::Bundled(_) => match target.object_path() {
            Some(path) => {
                let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
                vec![path.display().to_string(), format!("-Wl,-rpath,{}", dir.display())]
            }
            None => Vec::new(),
        },
        TargetSource::Native | TargetSource::Preload(_) => Vec::new(),
    }
}

fn site_bit(site: Site) -> &'static str {
    match site {
        Site::Container => "IN_CONTAINER",
        Site::Buffer => "IN_BUFFER",
    }
}

fn site_array(site: Site) -> &'static str {
    match site {
        Site::Container => "container",
        Site::Buffer => "buf",
    }
}

fn offset_expr(base: String, off: i64) -> String {
    match off {
        0 => base,
        o if o < 0 => format!("{base} - {}", o.unsigned_abs()),
        o => format!("{base} + {o}"),
    }
}

fn role(k: Knowledge, record: Option<u32>) -> Option<String> {
    match k {
        Knowledge::Heap => record.map(|r| format!("ADDR(p[{r}])")),
        Knowledge::Buffer => Some("ADDR(buf)".into()),
        Knowledge::Container => Some("ADDR(container)".into()),
    }
}

/// C expression for a value as materialized during replay.
fn value_expr(value: &Value, record: Option<u32>, word: u64) -> String {
    let literal = || {
        if word > 0xffff {
            format!("UINT64_C(0x{word:x})")
        } else {
            word.to_string()
        }
    };
    let (base, aligned) = match value.strategy {
        Strategy::Constant(i) => {
            let c = CONSTANTS[i as usize % CONSTANTS.len()];
            return if c > 0xffff { format!("UINT64_C(0x{c:x})") } else { c.to_string() };
        }
        Strategy::GroupSize(..) | Strategy::Null => return literal(),
        Strategy::PointerOffset(a, b) => match (role(a, record), role(b, record)) {
            (Some(x), Some(y)) => (format!("({x} - {y})"), a != Knowledge::Heap && b != Knowledge::Heap),
            _ => return literal(),
        },
        Strategy::RequestSize(_) => match record {
            Some(r) => (format!("req[{r}]"), true),
            None => return literal(),
        },
        Strategy::ChunkSize(_) => match record {
            Some(r) => (format!("usable[{r}]"), true),
            None => return literal(),
        },
        Strategy::BufferAddr => ("ADDR(buf)".into(), true),
        Strategy::ContainerAddr => ("ADDR(container)".into(), true),
        Strategy::HeapAddr => match record {
            Some(r) => (format!("ADDR(p[{r}])"), false),
            None => return literal(),
        },
    };
    let expr = match value.transform {
        Transform::None => base,
        Transform::Linear { a, b } => {
            let scaled = if a == 1 { base } else { format!("{a} * {base}") };
            offset_expr(scaled, b as i64 * WORD as i64)
        }
        Transform::Shift { b } => offset_expr(base, b as i64 * WORD as i64),
    };
    if value.strategy.is_address_typed() && !aligned {
        format!("({expr}) & ~UINT64_C(7)")
    } else {
        expr
    }
}

fn skip_reason(skip: Skip) -> &'static str {
    match skip {
        Skip::SizeFiltered => "size outside the model",
        Skip::ContainerFull => "container full",
        Skip::NoCandidate => "no suitable chunk",
        Skip::Freed => "chunk already freed",
        Skip::SlotOutOfRange => "slot outside the chunk",
        Skip::BugMismatch => "a different bug was already used",
    }
}

#[derive(Default)]
struct Uses {
    store: bool,
    store_byte: bool,
    buffer_write: bool,
    hits: bool,
    hits_live: bool,
    track: bool,
    value: bool,
    size: bool,
}

struct Emitter<'a> {
    body: String,
    uses: Uses,
    expect: &'a ImpactEvent,
}

impl Emitter<'_> {
    fn line(&mut self, s: impl AsRef<str>) {
        let _ = writeln!(self.body, "    {}", s.as_ref());
    }

    fn value(&mut self, entry: &LogEntry, v: &Value) -> String {
        let m = entry.value.unwrap_or_default();
        value_expr(v, m.record, m.word)
    }

    fn divergence_check(&mut self, index: usize) {
        match (self.expect.action_index == index, self.expect.class, self.expect.site) {
            (true, ImpactClass::ArbitraryWrite | ImpactClass::RestrictedWrite, Some(site)) => {
                let bit = site_bit(site);
                self.line(format!("if (diverged() & {bit}) return 0;"));
            }
            _ => self.line("diverged();"),
        }
    }

    fn chunk(r: u32) -> String {
        format!("container[{r}].ptr")
    }

    fn allocate(&mut self, entry: &LogEntry, size: &Value) {
        let m = entry.value.unwrap_or_default();
        let expr = value_expr(size, m.record, m.word);
        let literal = expr.chars().all(|c| c.is_ascii_digit());
        let arg = if literal {
            expr
        } else {
            self.uses.size = true;
            self.line(format!("n = {expr};"));
            "n".to_string()
        };
        let Some(k) = entry.new_record else {
            self.line(format!("if (malloc({arg}) != NULL) return 1;"));
            self.divergence_check(entry.index);
            return;
        };
        self.line(format!("p[{k}] = malloc({arg});"));
        self.line(format!("if (p[{k}] == NULL) return 1;"));
        self.divergence_check(entry.index);
        if self.expect.action_index == entry.index {
            let span = if literal { m.word.max(1).to_string() } else { "n ? n : 1".to_string() };
            match (self.expect.class, self.expect.site) {
                (ImpactClass::ArbitraryChunk, Some(site)) => {
                    self.uses.hits = true;
                    let a = site_array(site);
                    self.line(format!("if (hits(ADDR(p[{k}]), {span}, ADDR({a}), sizeof {a})) return 0;"));
                }
                (ImpactClass::OverlappingChunk, _) => {
                    self.uses.hits_live = true;
                    self.line(format!("if (hits_live(ADDR(p[{k}]), {span}, {k})) return 0;"));
                }
                _ => {}
            }
        }
        self.uses.track = true;
        self.line(format!("track({k}, {arg});"));
    }

    fn action(&mut self, entry: &LogEntry) {
        let i = entry.index;
        if let Some(skip) = entry.skipped {
            let _ = writeln!(self.body, "\n    /* {i}: {} skipped, {} */", entry.action.kind(), skip_reason(skip));
            self.line("diverged();");
            return;
        }
        let _ = writeln!(self.body, "\n    /* {i}: {} */", entry.action.kind());
        let rec = entry.record.unwrap_or(0);
        let off = entry.offset.unwrap_or(0);
        match &entry.action {
            Action::Allocate { size } => return self.allocate(entry, size),
            Action::Deallocate { .. } => {
                self.line(format!("free((void *)(uintptr_t){});", Self::chunk(rec)));
                self.line(format!("live[{rec}] = 0;"));
            }
            Action::HeapWrite { slot, value, .. } => {
                self.uses.store = true;
                let v = self.value(entry, value);
                self.line(format!("store({} + {}, {v});", Self::chunk(rec), Self::slot_expr(rec, *slot)));
            }
            Action::BufferWrite { value, .. } => {
                self.uses.buffer_write = true;
                let v = self.value(entry, value);
                self.line(format!("buffer_write({off}, {v});"));
            }
            Action::Bug(bug) => {
                self.line(format!("/* VULNERABILITY: {} */", bug.kind().description()));
                self.bug(entry, bug, rec);
            }
        }
        self.divergence_check(i);
    }

    /// Slots past the first eight count back from the usable size.
    fn slot_expr(rec: u32, slot: u8) -> String {
        match slot {
            0..=7 => (slot as u64 * WORD).to_string(),
            s => format!("usable[{rec}] - {}", (16 - s as u64) * WORD),
        }
    }

    fn bug(&mut self, entry: &LogEntry, bug: &BugAction, rec: u32) {
        let end = format!("{} + usable[{rec}]", Self::chunk(rec));
        match bug {
            BugAction::Overflow { words, value, .. } => {
                self.uses.store = true;
                self.uses.value = true;
                let v = self.value(entry, value);
                self.line(format!("v = {v};"));
                for k in 0..*words as u64 {
                    match k {
                        0 => self.line(format!("store({end}, v);")),
                        k => self.line(format!("store({end} + {}, v);", k * WORD)),
                    }
                }
            }
            BugAction::OffByOne { value, .. } => {
                self.uses.store_byte = true;
                let v = self.value(entry, value);
                self.line(format!("store_byte({end}, (unsigned char)({v}));"));
            }
            BugAction::OffByOneNull { .. } => {
                self.uses.store_byte = true;
                self.line(format!("store_byte({end}, 0);"));
            }
            BugAction::WriteAfterFree { slot, value, .. } => {
                self.uses.store = true;
                let v = self.value(entry, value);
                self.line(format!("store({} + {}, {v});", Self::chunk(rec), Self::slot_expr(rec, *slot)));
            }
            BugAction::DoubleFree { .. } => {
                self.line(format!("free((void *)(uintptr_t){});", Self::chunk(rec)));
            }
            BugAction::ArbitraryFree { target } => {
                let v = self.value(entry, target);
                self.line(format!("free((void *)(uintptr_t)({v}));"));
            }
        }
    }
}

fn prelude(uses: &Uses, usable_queried: bool) -> String {
    let mut out = String::new();
    out.push_str(
        "#include <stdint.h>\n#include <stdlib.h>\n#include <string.h>\n\n\
         #define ADDR(x) ((uint64_t)(uintptr_t)(x))\n\
         #define IN_CONTAINER 1\n#define IN_BUFFER 2\n\n",
    );
    if usable_queried && uses.track {
        out.push_str("size_t malloc_usable_size(void *);\n\n");
    }
    let _ = write!(
        out,
        "struct record {{\n    uint64_t ptr;\n    uint64_t size;\n}};\n\n\
         static _Alignas(4096) struct record container[{MAX_RECORDS}];\n\
         static _Alignas(4096) unsigned char buf[{BUFFER_SIZE}];\n\
         static struct record container_shadow[{MAX_RECORDS}];\n\
         static unsigned char buf_shadow[{BUFFER_SIZE}];\n"
    );
    if uses.track {
        let _ = write!(
            out,
            "static void *p[{MAX_RECORDS}];\nstatic uint64_t req[{MAX_RECORDS}];\n\
             static uint64_t usable[{MAX_RECORDS}];\nstatic int live[{MAX_RECORDS}];\n"
        );
    }
    out.push_str(
        "\n/* Reports which regions changed behind the program's back, then\n   accepts their current contents. */\n\
         static int diverged(void)\n{\n    int d = 0;\n\
         \x20   if (memcmp(container, container_shadow, sizeof container) != 0)\n        d |= IN_CONTAINER;\n\
         \x20   if (memcmp(buf, buf_shadow, sizeof buf) != 0)\n        d |= IN_BUFFER;\n\
         \x20   memcpy(container_shadow, container, sizeof container);\n\
         \x20   memcpy(buf_shadow, buf, sizeof buf);\n    return d;\n}\n",
    );
    if uses.store {
        out.push_str("\nstatic void store(uint64_t addr, uint64_t v)\n{\n    memcpy((void *)(uintptr_t)addr, &v, sizeof v);\n}\n");
    }
    if uses.store_byte {
        out.push_str("\nstatic void store_byte(uint64_t addr, unsigned char b)\n{\n    *(volatile unsigned char *)(uintptr_t)addr = b;\n}\n");
    }
    if uses.buffer_write {
        out.push_str(
            "\nstatic void buffer_write(size_t off, uint64_t v)\n{\n\
             \x20   memcpy(buf + off, &v, sizeof v);\n    memcpy(buf_shadow + off, &v, sizeof v);\n}\n",
        );
    }
    if uses.hits || uses.hits_live {
        out.push_str("\nstatic int hits(uint64_t a, uint64_t n, uint64_t b, uint64_t m)\n{\n    return a < b + m && b < a + n;\n}\n");
    }
    if uses.hits_live {
        out.push_str(
            "\nstatic int hits_live(uint64_t a, uint64_t n, int upto)\n{\n\
             \x20   for (int j = 0; j < upto; j++)\n\
             \x20       if (live[j] && hits(a, n, ADDR(p[j]), req[j] ? req[j] : 1))\n            return 1;\n\
             \x20   return 0;\n}\n",
        );
    }
    if uses.track {
        let usable = if usable_queried { "malloc_usable_size(p[k])" } else { "(n + 7) & ~(uint64_t)7" };
        let _ = write!(
            out,
            "\nstatic void track(int k, uint64_t n)\n{{\n\
             \x20   req[k] = n;\n    usable[k] = {usable};\n    live[k] = 1;\n\
             \x20   container[k].ptr = ADDR(p[k]);\n    container[k].size = n;\n\
             \x20   container_shadow[k] = container[k];\n}}\n"
        );
    }
    out
}

/// Builds the program for `report`, given a logged replay of its trace.
pub fn emit(report: &ImpactReport, replay: &Execution) -> Result<Poc, PocError> {
    let Some(expect) = replay.verdict.primary else {
        return Err(PocError::Stale("no impact".into()));
    };
    if expect.key() != report.key() {
        return Err(PocError::Stale(format!("{}/{}", expect.class, expect.site.map_or("-", Site::name))));
    }
    if replay.log.is_empty() && !report.trace.is_empty() {
        return Err(PocError::MissingLog);
    }
    let mut e = Emitter { body: String::new(), uses: Uses::default(), expect: &expect };
    for entry in &replay.log {
        e.action(entry);
    }
    let target: TargetSource = report.target.parse().unwrap_or(TargetSource::Native);
    let hash = trace_hash(&report.trace);
    let mut build = DEFAULT_CC.to_string() + " poc.c";
    for arg in link_args(&target) {
        build.push(' ');
        build.push_str(&arg);
    }
    let mut source = String::new();
    let _ = writeln!(source, "/*\n * heapscout reproducer");
    let _ = writeln!(source, " * target: {}", report.target);
    let _ = writeln!(
        source,
        " * impact: {} at {}, action {} ({})",
        expect.class,
        expect.site.map_or("a live chunk", Site::name),
        expect.action_index,
        expect.action
    );
    let _ = writeln!(source, " * trace:  {hash} ({})", report.codec_version);
    let _ = writeln!(source, " * build:  {build}");
    if let Some(path) = target.preload() {
        let _ = writeln!(source, " * run:    LD_PRELOAD={} ./a.out", path.display());
    }
    let _ = writeln!(source, " * Exit status 0 means the impact was reproduced.\n */");
    source.push_str(&prelude(&e.uses, replay.usable_queried));
    source.push_str("\nint main(void)\n{\n");
    if e.uses.size {
        source.push_str("    uint64_t n;\n");
    }
    if e.uses.value {
        source.push_str("    uint64_t v;\n");
    }
    source.push_str(&e.body);
    source.push_str("\n    return 1;\n}\n");
    let file_name = format!("{}_{}_{hash}.c", target.slug(), expect.class);
    Ok(Poc { file_name, source, expect })
}

/// Compiles `source` in `dir` and runs it. Returns the exit status, or `-signal`.
pub fn compile_and_run(source: &str, target: &TargetSource, cc: &str, dir: &Path) -> Result<i32, PocError> {
    let src = dir.join("poc.c");
    let bin = dir.join("poc");
    std::fs::write(&src, source)?;
    let mut words = cc.split_whitespace();
    let program = words.next().ok_or_else(|| PocError::Compile("empty compiler command".into()))?;
    let out = Command::new(program)
        .args(words)
        .arg(&src)
        .arg("-o")
        .arg(&bin)
        .args(link_args(target))
        .output()?;
    if !out.status.success() {
        return Err(PocError::Compile(String::from_utf8_lossy(&out.stderr).trim().to_string()));
    }
    let mut cmd = Command::new(&bin);
    cmd.stdin(Stdio::null()).stdout(Stdio::null()).stderr(Stdio::null()).env("LIBC_FATAL_STDERR_", "1");
    if let Some(path) = target.preload() {
        cmd.env("LD_PRELOAD", path);
    }
    let mut child = cmd.spawn()?;
    let start = Instant::now();
    loop {
        if let Some(status) = child.try_wait()? {
            use std::os::unix::process::ExitStatusExt;
            return Ok(status.code().unwrap_or_else(|| -status.signal().unwrap_or(0)));
        }
        if start.elapsed() > RUN_TIMEOUT {
            let _ = child.kill();
            let _ = child.wait();
            return Ok(-libc::SIGKILL);
        }
        std::thread::sleep(Duration::from_millis(5));
    }
}
