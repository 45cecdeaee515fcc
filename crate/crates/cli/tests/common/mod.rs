#![allow(dead_code)]

use std::path::{Path, PathBuf};

use heapscout::codec::{encode, Action, BugAction, Strategy, Value};
use heapscout::model::{ModelSpec, SizeGroup, SizePick};
use heapscout::sandbox::{RunResult, WorkerClient, WorkerConfig};
use heapscout::target::TargetSource;

pub fn exe() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_heapscout"))
}

pub fn client(target: &str, spec: &ModelSpec) -> WorkerClient {
    let config = WorkerConfig::new(target.parse::<TargetSource>().unwrap(), spec.clone());
    WorkerClient::spawn(&exe(), &config).unwrap()
}

pub fn run(target: &str, spec: &ModelSpec, actions: &[Action], salt: u64) -> RunResult {
    let bytes = encode(actions, spec).unwrap();
    client(target, spec).run(&bytes, salt, true).unwrap()
}

/// I3 size in group 1 that materializes to exactly `size` (32..1024).
pub fn size(size: u64) -> Value {
    let g = SizeGroup::new(1).unwrap();
    let offset = (0..=u16::MAX).find(|o| SizePick::Group(g).size_at(*o) == size).unwrap();
    Value::plain(Strategy::GroupSize(SizePick::Group(g), offset))
}

pub fn alloc(n: u64) -> Action {
    Action::Allocate { size: size(n) }
}

pub fn write(chunk: u8, slot: u8, value: Value) -> Action {
    Action::HeapWrite { chunk, slot, value }
}

pub fn free(chunk: u8) -> Action {
    Action::Deallocate { chunk }
}

/// Usable size of record `chunk` plus `words` words.
pub fn usable_plus(chunk: u8, words: i8) -> Value {
    Value::linear(Strategy::ChunkSize(chunk), 1, words)
}

/// Two 136-byte chunks; a fake free chunk inside the first whose fd/bk are
/// `fd`/`bk`; an overflow that clears the second chunk's PREV_INUSE; then
/// the free that unlinks the fake chunk.
pub fn unlink_trace(fd: Value, bk: Value) -> Vec<Action> {
    vec![
        alloc(136),
        alloc(136),
        write(0, 1, usable_plus(0, -1)),
        write(0, 2, fd),
        write(0, 3, bk),
        write(0, 15, usable_plus(0, -1)),
        Action::Bug(BugAction::Overflow { chunk: 0, words: 1, value: usable_plus(1, 1) }),
        free(1),
    ]
}

/// Pointer-based unlink through the container entry of chunk 0, followed by
/// a write that redirects that entry to the buffer and a write through it.
pub fn container_unlink_trace() -> Vec<Action> {
    let mut t = unlink_trace(
        Value::shifted(Strategy::ContainerAddr, -3),
        Value::shifted(Strategy::ContainerAddr, -2),
    );
    t.push(write(0, 3, Value::plain(Strategy::BufferAddr)));
    t.push(write(0, 0, Value::plain(Strategy::Constant(1))));
    t
}

pub fn buffer_unlink_trace() -> Vec<Action> {
    unlink_trace(Value::plain(Strategy::BufferAddr), Value::shifted(Strategy::BufferAddr, 1))
}

pub fn bundled(name: &str) -> String {
    format!("bundled:{name}")
}

pub fn so_path(name: &str) -> PathBuf {
    refalloc::shared_object(name).unwrap()
}

pub fn tmp_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}
