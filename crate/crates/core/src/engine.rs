//! Trace interpreter.
//!
//! The engine owns two attacker-visible regions mapped at salt-derived
//! addresses: the container (one `{ptr, size}` record per allocation) and a
//! 4 KiB global buffer. Chunk pointers are always read back from the
//! container, so corruption of a record redirects later heap writes and
//! frees. Request and usable sizes are kept privately, out of the target's
//! reach.
//!
//! Nothing here allocates through the target except the actions themselves.

use serde::{Deserialize, Serialize};

use crate::codec::{materialize, Action, BugAction, Materialized, TraceProgram, Value, ValueContext, BUFFER_SIZE, WORD};
use crate::detector::{divergence_class, final_verdict, ImpactEvent, Region, ShadowState, Verdict};
use crate::model::{ActionKind, BugKind, ModelSpec, Site};
use crate::target::HeapTarget;

pub const MAX_RECORDS: usize = 256;
pub const RECORD_SIZE: u64 = 16;
pub const CONTAINER_SIZE: u64 = MAX_RECORDS as u64 * RECORD_SIZE;

/// Addresses of the attacker-visible regions for one salt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub container: u64,
    pub buffer: u64,
}

impl Layout {
    /// Preferred addresses; the mapping may land elsewhere if taken.
    pub fn for_salt(salt: u64) -> Layout {
        let h = splitmix64(salt);
        Layout {
            container: 0x2000_0000_0000 + (h % (1 << 24)) * 4096,
            buffer: 0x3000_0000_0000 + ((h >> 24) % (1 << 24)) * 4096,
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Mapping {
    base: u64,
    len: u64,
}

impl Mapping {
    fn new(hint: u64, len: u64) -> Mapping {
        let prot = libc::PROT_READ | libc::PROT_WRITE;
        let flags = libc::MAP_PRIVATE | libc::MAP_ANONYMOUS;
        // SAFETY: fresh anonymous mapping; NOREPLACE never clobbers.
        let mut p = unsafe {
            libc::mmap(hint as *mut _, len as usize, prot, flags | libc::MAP_FIXED_NOREPLACE, -1, 0)
        };
        if p == libc::MAP_FAILED {
            // SAFETY: as above, placement left to the kernel.
            p = unsafe { libc::mmap(std::ptr::null_mut(), len as usize, prot, flags, -1, 0) };
        }
        assert!(p != libc::MAP_FAILED, "cannot map engine region");
        Mapping { base: p as u64, len }
    }

    fn bytes(&self) -> &[u8] {
        // SAFETY: the mapping is live and readable for its whole length.
        unsafe { std::slice::from_raw_parts(self.base as *const u8, self.len as usize) }
    }
}

impl Drop for Mapping {
    fn drop(&mut self) {
        // SAFETY: unmapping exactly what `new` mapped.
        unsafe { libc::munmap(self.base as *mut _, self.len as usize) };
    }
}

/// Why an action did nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Skip {
    /// The materialized size is outside the spec's size groups.
    SizeFiltered,
    ContainerFull,
    /// No record exists yet, or none in the state the action needs.
    NoCandidate,
    /// The chunk was freed by a legitimate deallocation.
    Freed,
    SlotOutOfRange,
    /// A different bug was already committed.
    BugMismatch,
}

/// One entry of the executed-action log.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub index: usize,
    pub action: Action,
    pub skipped: Option<Skip>,
    /// Record the action operated on.
    pub record: Option<u32>,
    /// Materialized value, with the record it was derived from.
    pub value: Option<Materialized>,
    /// Result of an Allocate: the target's return value.
    pub address: Option<u64>,
    /// Record created by an Allocate.
    pub new_record: Option<u32>,
    /// Byte offset of the write relative to the chunk base or buffer base.
    pub offset: Option<u64>,
}

impl LogEntry {
    pub fn executed(&self) -> bool {
        self.skipped.is_none()
    }
}

/// Callbacks used by the sandbox to stream progress and by tests to audit
/// writes.
pub trait Observer {
    fn on_action_start(&mut self, _index: usize) {}
    fn on_event(&mut self, _event: &ImpactEvent) {}
    fn on_write(&mut self, _addr: u64, _len: u64) {}
}

/// Observer that ignores everything.
pub struct Silent;

impl Observer for Silent {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Live,
    Freed,
}

#[derive(Debug, Clone, Copy)]
struct Record {
    base: u64,
    request: u64,
    usable: u64,
    status: Status,
}

/// Result of one execution.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Execution {
    pub layout: Layout,
    pub events: Vec<ImpactEvent>,
    pub log: Vec<LogEntry>,
    pub verdict: Verdict,
    pub committed_bug: Option<BugKind>,
    /// Usable sizes came from the allocator, not from rounding.
    #[serde(default)]
    pub usable_queried: bool,
}

struct Engine<'a, T: HeapTarget, O: Observer> {
    target: &'a mut T,
    observer: &'a mut O,
    spec: &'a ModelSpec,
    container: Mapping,
    buffer: Mapping,
    shadow: ShadowState,
    records: Vec<Record>,
    committed: Option<BugKind>,
    events: Vec<ImpactEvent>,
}

impl<T: HeapTarget, O: Observer> ValueContext for Engine<'_, T, O> {
    fn record_count(&self) -> usize {
        self.records.len()
    }
    fn request_size(&self, i: usize) -> u64 {
        self.records[i].request
    }
    fn usable_size(&self, i: usize) -> u64 {
        self.records[i].usable
    }
    fn last_allocation(&self) -> Option<(usize, u64)> {
        self.records.last().map(|r| (self.records.len() - 1, r.base))
    }
    fn buffer_base(&self) -> u64 {
        self.buffer.base
    }
    fn container_base(&self) -> u64 {
        self.container.base
    }
}

/// Offset of slot `slot` inside a chunk with `usable` bytes, if it fits.
/// Slots 0..8 count words from the start, 8..16 from the end.
pub fn slot_offset(slot: u8, usable: u64) -> Option<u64> {
    if slot < 8 {
        let off = slot as u64 * WORD;
        (off + WORD <= usable).then_some(off)
    } else {
        usable.checked_sub((16 - slot as u64) * WORD)
    }
}

impl<T: HeapTarget, O: Observer> Engine<'_, T, O> {
    fn record_ptr(&self, i: usize) -> u64 {
        // SAFETY: i < MAX_RECORDS, inside the container mapping.
        unsafe { std::ptr::read_unaligned((self.container.base + i as u64 * RECORD_SIZE) as *const u64) }
    }

    fn write_word(&mut self, addr: u64, word: u64) {
        self.observer.on_write(addr, WORD);
        // SAFETY: deliberately unchecked; bad addresses crash the sandboxed
        // worker.
        unsafe { std::ptr::write_unaligned(addr as *mut u64, word) }
    }

    fn write_byte(&mut self, addr: u64, byte: u8) {
        self.observer.on_write(addr, 1);
        // SAFETY: as in write_word.
        unsafe { std::ptr::write_volatile(addr as *mut u8, byte) }
    }

    fn value(&self, v: &Value) -> Materialized {
        materialize(v, self)
    }

    fn pick(&self, raw: u8, status: Option<Status>) -> Option<usize> {
        let candidates: Vec<usize> = (0..self.records.len())
            .filter(|i| status.is_none_or(|s| self.records[*i].status == s))
            .collect();
        match candidates.len() {
            0 => None,
            n => Some(candidates[raw as usize % n]),
        }
    }

    fn check_divergence(&mut self, index: usize, action: ActionKind, bug: Option<BugKind>) {
        let sites = self.shadow.check_divergence(self.container.bytes(), self.buffer.bytes());
        for site in sites {
            let class = divergence_class(action, bug);
            self.push_event(ImpactEvent { class, site: Some(site), action_index: index, action, bug });
        }
    }

    fn push_event(&mut self, event: ImpactEvent) {
        self.observer.on_event(&event);
        self.events.push(event);
    }

    fn run(&mut self, index: usize, action: &Action) -> LogEntry {
        let mut entry = LogEntry {
            index,
            action: *action,
            skipped: None,
            record: None,
            value: None,
            address: None,
            new_record: None,
            offset: None,
        };
        let skip = match action {
            Action::Allocate { size } => self.allocate(index, size, &mut entry),
            Action::Deallocate { chunk } => self.deallocate(*chunk, &mut entry),
            Action::HeapWrite { chunk, slot, value } => self.heap_write(*chunk, *slot, value, &mut entry),
            Action::BufferWrite { offset, value } => {
                let v = self.value(value);
                entry.value = Some(v);
                entry.offset = Some(*offset as u64);
                let addr = self.buffer.base + *offset as u64;
                self.write_word(addr, v.word);
                self.shadow.sync(Site::Buffer, *offset as usize, &v.word.to_ne_bytes());
                None
            }
            Action::Bug(bug) => self.bug(bug, &mut entry),
        };
        entry.skipped = skip;
        self.check_divergence(index, action.kind(), action.bug());
        entry
    }

    fn allocate(&mut self, index: usize, size: &Value, entry: &mut LogEntry) -> Option<Skip> {
        let v = self.value(size);
        entry.value = Some(v);
        if !self.spec.allows_size(v.word) {
            return Some(Skip::SizeFiltered);
        }
        if self.records.len() >= MAX_RECORDS {
            return Some(Skip::ContainerFull);
        }
        let addr = self.target.allocate(v.word);
        entry.address = Some(addr);
        self.check_divergence(index, ActionKind::Allocate, None);
        if addr == 0 {
            return None;
        }
        let span = v.word.max(1);
        if let Some((class, site)) = self.shadow.check_allocation(addr, span) {
            self.push_event(ImpactEvent { class, site, action_index: index, action: ActionKind::Allocate, bug: None });
        }
        let usable = self.target.usable_size(addr, v.word);
        let i = self.records.len();
        let slot = self.container.base + i as u64 * RECORD_SIZE;
        self.write_word(slot, addr);
        self.write_word(slot + WORD, v.word);
        let mut bytes = [0u8; RECORD_SIZE as usize];
        bytes[..8].copy_from_slice(&addr.to_ne_bytes());
        bytes[8..].copy_from_slice(&v.word.to_ne_bytes());
        self.shadow.sync(Site::Container, i * RECORD_SIZE as usize, &bytes);
        self.shadow.record_chunk(addr, span);
        self.records.push(Record { base: addr, request: v.word, usable, status: Status::Live });
        entry.new_record = Some(i as u32);
        None
    }

    fn deallocate(&mut self, chunk: u8, entry: &mut LogEntry) -> Option<Skip> {
        let Some(i) = self.pick(chunk, None) else {
            return Some(Skip::NoCandidate);
        };
        entry.record = Some(i as u32);
        if self.records[i].status == Status::Freed {
            return Some(Skip::Freed);
        }
        let ptr = self.record_ptr(i);
        self.target.deallocate(ptr);
        self.records[i].status = Status::Freed;
        self.shadow.set_live(i, false);
        None
    }

    fn heap_write(&mut self, chunk: u8, slot: u8, value: &Value, entry: &mut LogEntry) -> Option<Skip> {
        let Some(i) = self.pick(chunk, None) else {
            return Some(Skip::NoCandidate);
        };
        entry.record = Some(i as u32);
        if self.records[i].status == Status::Freed {
            return Some(Skip::Freed);
        }
        let Some(off) = slot_offset(slot, self.records[i].usable) else {
            return Some(Skip::SlotOutOfRange);
        };
        let v = self.value(value);
        entry.value = Some(v);
        entry.offset = Some(off);
        let ptr = self.record_ptr(i);
        self.write_word(ptr.wrapping_add(off), v.word);
        None
    }

    fn bug(&mut self, bug: &BugAction, entry: &mut LogEntry) -> Option<Skip> {
        let kind = bug.kind();
        if self.committed.is_some_and(|c| c != kind) {
            return Some(Skip::BugMismatch);
        }
        let (chunk, wanted) = match bug {
            BugAction::Overflow { chunk, .. }
            | BugAction::OffByOne { chunk, .. }
            | BugAction::OffByOneNull { chunk } => (Some(*chunk), Status::Live),
            BugAction::WriteAfterFree { chunk, .. } | BugAction::DoubleFree { chunk } => (Some(*chunk), Status::Freed),
            BugAction::ArbitraryFree { .. } => (None, Status::Live),
        };
        let record = match chunk {
            Some(c) => match self.pick(c, Some(wanted)) {
                Some(i) => Some(i),
                None => return Some(Skip::NoCandidate),
            },
            None => None,
        };
        entry.record = record.map(|i| i as u32);
        let usable = record.map_or(0, |i| self.records[i].usable);
        let ptr = record.map_or(0, |i| self.record_ptr(i));
        match bug {
            BugAction::Overflow { words, value, .. } => {
                let v = self.value(value);
                entry.value = Some(v);
                entry.offset = Some(usable);
                for k in 0..*words as u64 {
                    self.write_word(ptr.wrapping_add(usable + k * WORD), v.word);
                }
            }
            BugAction::OffByOne { value, .. } => {
                let v = self.value(value);
                entry.value = Some(v);
                entry.offset = Some(usable);
                self.write_byte(ptr.wrapping_add(usable), v.word as u8);
            }
            BugAction::OffByOneNull { .. } => {
                entry.offset = Some(usable);
                self.write_byte(ptr.wrapping_add(usable), 0);
            }
            BugAction::WriteAfterFree { slot, value, .. } => {
                let Some(off) = slot_offset(*slot, usable) else {
                    return Some(Skip::SlotOutOfRange);
                };
                let v = self.value(value);
                entry.value = Some(v);
                entry.offset = Some(off);
                self.write_word(ptr.wrapping_add(off), v.word);
            }
            BugAction::DoubleFree { .. } => self.target.deallocate(ptr),
            BugAction::ArbitraryFree { target } => {
                let v = self.value(target);
                entry.value = Some(v);
                self.target.deallocate(v.word);
            }
        }
        self.committed = Some(kind);
        None
    }
}

/// Runs `program` against `target`. Allocator aborts end the process; the
/// observer sees progress up to that point.
pub fn execute<T: HeapTarget, O: Observer>(
    program: &TraceProgram,
    target: &mut T,
    spec: &ModelSpec,
    salt: u64,
    observer: &mut O,
) -> Execution {
    let hint = Layout::for_salt(salt);
    let container = Mapping::new(hint.container, CONTAINER_SIZE);
    let buffer = Mapping::new(hint.buffer, BUFFER_SIZE);
    let layout = Layout { container: container.base, buffer: buffer.base };
    let shadow = ShadowState::new(
        Region { base: container.base, len: CONTAINER_SIZE },
        container.bytes(),
        Region { base: buffer.base, len: BUFFER_SIZE },
        buffer.bytes(),
    );
    let mut engine = Engine {
        target,
        observer,
        spec,
        container,
        buffer,
        shadow,
        records: Vec::with_capacity(MAX_RECORDS),
        committed: None,
        events: Vec::new(),
    };
    let mut log = Vec::with_capacity(program.len());
    for (index, action) in program.actions.iter().enumerate() {
        engine.observer.on_action_start(index);
        log.push(engine.run(index, action));
    }
    let verdict = final_verdict(&engine.events, &spec.impacts);
    let usable_queried = engine.target.queries_usable_size();
    Execution { layout, events: engine.events, log, verdict, committed_bug: engine.committed, usable_queried }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::{encode, Strategy};

    /// Bump allocator over a Rust-owned pool; frees are recorded only.
    struct Bump {
        pool: Vec<u64>,
        next: usize,
        freed: Vec<u64>,
    }

    impl Bump {
        fn new() -> Self {
            Bump { pool: vec![0; 4096], next: 2, freed: vec![] }
        }
    }

    impl HeapTarget for Bump {
        fn id(&self) -> &str {
            "bump"
        }
        fn allocate(&mut self, size: u64) -> u64 {
            let words = (size as usize).div_ceil(8).max(1) + 2;
            if self.next + words > self.pool.len() {
                return 0;
            }
            let addr = self.pool.as_ptr() as u64 + self.next as u64 * 8;
            self.next += words;
            addr
        }
        fn deallocate(&mut self, addr: u64) {
            self.freed.push(addr);
        }
        fn usable_size(&self, _addr: u64, request: u64) -> u64 {
            (request + 7) & !7
        }
    }

    fn run(actions: &[Action], spec: &ModelSpec) -> (Execution, Bump) {
        let program = crate::codec::decode(&encode(actions, spec).unwrap(), spec);
        assert_eq!(program.actions, actions);
        let mut t = Bump::new();
        let e = execute(&program, &mut t, spec, 7, &mut Silent);
        (e, t)
    }

    const C32: Value = Value::plain(Strategy::Constant(5));

    #[test]
    fn empty_program_has_no_impact() {
        let (e, _) = run(&[], &ModelSpec::default());
        assert!(!e.verdict.is_finding());
        assert!(e.log.is_empty());
    }

    #[test]
    fn repeated_deallocate_is_ignored() {
        let spec = ModelSpec::parse("bugs = WF,AF,OF").unwrap();
        let actions = [
            Action::Allocate { size: C32 },
            Action::Deallocate { chunk: 0 },
            Action::Deallocate { chunk: 0 },
        ];
        let (e, t) = run(&actions, &spec);
        assert_eq!(t.freed.len(), 1);
        assert_eq!(e.log[2].skipped, Some(Skip::Freed));
        assert!(!e.verdict.is_finding());
    }

    #[test]
    fn double_free_needs_a_freed_chunk() {
        let spec = ModelSpec::default();
        let ff = Action::Bug(BugAction::DoubleFree { chunk: 0 });
        let (e, t) = run(&[Action::Allocate { size: C32 }, ff], &spec);
        assert_eq!(e.log[1].skipped, Some(Skip::NoCandidate));
        assert!(t.freed.is_empty());
        assert_eq!(e.committed_bug, None);
    }

    #[test]
    fn overflow_writes_past_usable() {
        let spec = ModelSpec::default();
        let of = Action::Bug(BugAction::Overflow { chunk: 0, words: 2, value: Value::plain(Strategy::Constant(4)) });
        // Constant 24 as request size: usable 24.
        let actions = [Action::Allocate { size: Value::plain(Strategy::Constant(4)) }, of];
        let program = crate::codec::decode(&encode(&actions, &spec).unwrap(), &spec);
        let mut t = Bump::new();
        struct Writes(Vec<(u64, u64)>);
        impl Observer for Writes {
            fn on_write(&mut self, a: u64, l: u64) {
                self.0.push((a, l));
            }
        }
        let mut w = Writes(vec![]);
        let e = execute(&program, &mut t, &spec, 1, &mut w);
        let base = e.log[0].address.unwrap();
        assert_eq!(&w.0[2..], &[(base + 24, 8), (base + 32, 8)]);
    }

    #[test]
    fn single_bug_rule() {
        let spec = ModelSpec::default();
        let actions = [
            Action::Allocate { size: C32 },
            Action::Bug(BugAction::OffByOneNull { chunk: 0 }),
            Action::Bug(BugAction::OffByOne { chunk: 0, value: C32 }),
            Action::Bug(BugAction::OffByOneNull { chunk: 0 }),
        ];
        let (e, _) = run(&actions, &spec);
        assert_eq!(e.committed_bug, Some(BugKind::OffByOneNull));
        assert_eq!(e.log[2].skipped, Some(Skip::BugMismatch));
        assert!(e.log[3].executed());
    }

    #[test]
    fn write_after_free_waits_for_a_freed_chunk() {
        let spec = ModelSpec::default();
        let actions = [
            Action::Allocate { size: C32 },
            Action::Bug(BugAction::WriteAfterFree { chunk: 0, slot: 0, value: C32 }),
            Action::Deallocate { chunk: 0 },
            Action::Bug(BugAction::WriteAfterFree { chunk: 0, slot: 0, value: C32 }),
        ];
        let (e, _) = run(&actions, &spec);
        assert_eq!(e.log[1].skipped, Some(Skip::NoCandidate));
        assert!(e.log[3].executed());
        assert_eq!(e.committed_bug, Some(BugKind::WriteAfterFree));
        assert!(!e.verdict.is_finding());
    }

    #[test]
    fn buffer_writes_are_synced() {
        let write = [Action::BufferWrite { offset: 8, value: Value::plain(Strategy::ContainerAddr) }];
        let (e, _) = run(&write, &ModelSpec::default());
        assert!(e.events.is_empty());
        assert_eq!(e.log[0].value.unwrap().word, e.layout.container);
    }

    #[test]
    fn slot_offsets() {
        assert_eq!(slot_offset(0, 8), Some(0));
        assert_eq!(slot_offset(1, 8), None);
        assert_eq!(slot_offset(15, 24), Some(16));
        assert_eq!(slot_offset(8, 64), Some(0));
        assert_eq!(slot_offset(8, 56), None);
    }

    #[test]
    fn size_filter_skips_allocations() {
        let spec = ModelSpec::parse("size_groups = 1").unwrap();
        let small = Value::plain(Strategy::Constant(3)); // 16
        let (e, t) = run(&[Action::Allocate { size: small }, Action::Allocate { size: C32 }], &spec);
        assert_eq!(e.log[0].skipped, Some(Skip::SizeFiltered));
        assert!(e.log[1].executed());
        assert_eq!(t.next, 2 + 4 + 2);
    }

    #[test]
    fn layout_depends_on_salt() {
        assert_ne!(Layout::for_salt(1), Layout::for_salt(2));
        assert_eq!(Layout::for_salt(9), Layout::for_salt(9));
        assert_eq!(Layout::for_salt(3).container % 4096, 0);
    }
}
