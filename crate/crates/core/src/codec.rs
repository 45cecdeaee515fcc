//! Byte-stream codec for heap action traces.
//!
//! Decoding is a total function of `(bytes, ModelSpec)`: every byte string
//! maps to a program, and a trailing action that runs out of parameter bytes
//! is dropped. Parameters stay symbolic (record indices and value strategies),
//! so a trace replays under any address layout.
//!
//! Wire format, one action after another:
//!
//! ```text
//! kind      1 byte   enabled_actions[b % n]
//! Allocate  value block (integer strategies only)
//! Deallocate 1 byte record index
//! HeapWrite 1 byte record index, 1 byte slot (% 16), value block
//! BufferWrite 2 bytes LE offset ((v % 4088) & !7), value block
//! BugInvoke 1 byte enabled_bugs[b % n], then per bug:
//!     OF  record, words (1 + b % 8), value block
//!     WF  record, slot, value block
//!     AF  value block (address strategies only)
//!     FF  record
//!     O1  record, value block
//!     O1N record
//! value block: selector over enabled strategies [I1..I5, P1..P4], strategy
//!     parameters (I1 constant, I2 role pair, I3 group + 2 bytes offset,
//!     I4/I5 record), then a transform block for the strategies that take one:
//!     I4/I5 mode % 3 (none, linear a*x+b, shift x+b); I2 and P2..P4 mode % 2
//!     (none, shift). `a` is one byte indexing {1,2,3,4,8}; `b` is one signed
//!     byte counted in words.
//! ```

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::CodecError;
use crate::model::{ActionKind, BugKind, Knowledge, ModelSpec, SizePick};

/// Version tag stamped into every report.
pub const CODEC_VERSION: &str = "hs-codec-1";
pub const DEFAULT_MAX_ACTIONS: usize = 256;
pub const WORD: u64 = 8;
pub const BUFFER_SIZE: u64 = 4096;
/// Legitimate heap writes address 8 words from the start and 8 from the end.
pub const SLOTS: u8 = 16;
pub const MAX_OVERFLOW_WORDS: u8 = 8;

/// Pre-defined constants for the I1 strategy.
pub const CONSTANTS: [u64; 16] = [
    0,
    1,
    8,
    16,
    24,
    32,
    64,
    127,
    128,
    255,
    256,
    4096,
    1 << 16,
    (1 << 20) - 1,
    u64::MAX,
    u64::MAX - 7,
];

/// Multipliers available to the linear transform.
pub const MULTIPLIERS: [u8; 5] = [1, 2, 3, 4, 8];

/// How a concrete word is derived at execution time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// I1: index into [`CONSTANTS`].
    Constant(u8),
    /// I2: `addr(from) - addr(to)`.
    PointerOffset(Knowledge, Knowledge),
    /// I3: a size inside a group (or an explicit size) of the model spec.
    GroupSize(SizePick, u16),
    /// I4: request size of a recorded chunk.
    RequestSize(u8),
    /// I5: usable size of a recorded chunk.
    ChunkSize(u8),
    /// P1
    Null,
    /// P2
    BufferAddr,
    /// P3: base of the most recent allocation.
    HeapAddr,
    /// P4
    ContainerAddr,
}

/// Strategy identifiers in canonical selector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StrategyId {
    I1,
    I2,
    I3,
    I4,
    I5,
    P1,
    P2,
    P3,
    P4,
}

const STRATEGY_ORDER: [StrategyId; 9] = [
    StrategyId::I1,
    StrategyId::I2,
    StrategyId::I3,
    StrategyId::I4,
    StrategyId::I5,
    StrategyId::P1,
    StrategyId::P2,
    StrategyId::P3,
    StrategyId::P4,
];

impl StrategyId {
    fn is_address(self) -> bool {
        matches!(self, StrategyId::P1 | StrategyId::P2 | StrategyId::P3 | StrategyId::P4)
    }

    fn available(self, spec: &ModelSpec) -> bool {
        match self {
            StrategyId::I2 => known_roles(spec).len() >= 2,
            StrategyId::I3 => !spec.size_pool().is_empty(),
            StrategyId::P2 => spec.knows(Knowledge::Buffer),
            StrategyId::P3 => spec.knows(Knowledge::Heap),
            StrategyId::P4 => spec.knows(Knowledge::Container),
            _ => true,
        }
    }

    /// Number of transform modes, 0 when the strategy takes no transform block.
    fn transform_modes(self) -> u8 {
        match self {
            StrategyId::I4 | StrategyId::I5 => 3,
            StrategyId::I2 | StrategyId::P2 | StrategyId::P3 | StrategyId::P4 => 2,
            _ => 0,
        }
    }
}

impl Strategy {
    fn id(&self) -> StrategyId {
        match self {
            Strategy::Constant(_) => StrategyId::I1,
            Strategy::PointerOffset(..) => StrategyId::I2,
            Strategy::GroupSize(..) => StrategyId::I3,
            Strategy::RequestSize(_) => StrategyId::I4,
            Strategy::ChunkSize(_) => StrategyId::I5,
            Strategy::Null => StrategyId::P1,
            Strategy::BufferAddr => StrategyId::P2,
            Strategy::HeapAddr => StrategyId::P3,
            Strategy::ContainerAddr => StrategyId::P4,
        }
    }

    /// Short name (`I1`..`P4`).
    pub fn name(&self) -> &'static str {
        match self.id() {
            StrategyId::I1 => "I1",
            StrategyId::I2 => "I2",
            StrategyId::I3 => "I3",
            StrategyId::I4 => "I4",
            StrategyId::I5 => "I5",
            StrategyId::P1 => "P1",
            StrategyId::P2 => "P2",
            StrategyId::P3 => "P3",
            StrategyId::P4 => "P4",
        }
    }

    /// I2 and P1..P4 yield addresses (or address differences) and are kept
    /// word-aligned.
    pub fn is_address_typed(&self) -> bool {
        matches!(self.id(), StrategyId::I2) || self.id().is_address()
    }
}

/// Noise applied to a strategy's base value. `b` is in words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Transform {
    None,
    Linear { a: u8, b: i8 },
    Shift { b: i8 },
}

impl Transform {
    pub fn apply(self, x: u64) -> u64 {
        match self {
            Transform::None => x,
            Transform::Linear { a, b } => x.wrapping_mul(a as u64).wrapping_add(words(b)),
            Transform::Shift { b } => x.wrapping_add(words(b)),
        }
    }
}

fn words(b: i8) -> u64 {
    (b as i64 * WORD as i64) as u64
}

/// A symbolic value: strategy plus transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Value {
    pub strategy: Strategy,
    pub transform: Transform,
}

impl Value {
    pub const fn plain(strategy: Strategy) -> Self {
        Value { strategy, transform: Transform::None }
    }

    pub const fn shifted(strategy: Strategy, words: i8) -> Self {
        Value { strategy, transform: Transform::Shift { b: words } }
    }

    pub const fn linear(strategy: Strategy, a: u8, words: i8) -> Self {
        Value { strategy, transform: Transform::Linear { a, b: words } }
    }
}

/// Parameters of a bug invocation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum BugAction {
    Overflow { chunk: u8, words: u8, value: Value },
    WriteAfterFree { chunk: u8, slot: u8, value: Value },
    ArbitraryFree { target: Value },
    DoubleFree { chunk: u8 },
    OffByOne { chunk: u8, value: Value },
    OffByOneNull { chunk: u8 },
}

impl BugAction {
    pub fn kind(&self) -> BugKind {
        match self {
            BugAction::Overflow { .. } => BugKind::Overflow,
            BugAction::WriteAfterFree { .. } => BugKind::WriteAfterFree,
            BugAction::ArbitraryFree { .. } => BugKind::ArbitraryFree,
            BugAction::DoubleFree { .. } => BugKind::DoubleFree,
            BugAction::OffByOne { .. } => BugKind::OffByOne,
            BugAction::OffByOneNull { .. } => BugKind::OffByOneNull,
        }
    }
}

/// One decoded heap action. `chunk` fields are raw index bytes, reduced
/// modulo the live record count when executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Allocate { size: Value },
    Deallocate { chunk: u8 },
    HeapWrite { chunk: u8, slot: u8, value: Value },
    BufferWrite { offset: u16, value: Value },
    Bug(BugAction),
}

impl Action {
    pub fn kind(&self) -> ActionKind {
        match self {
            Action::Allocate { .. } => ActionKind::Allocate,
            Action::Deallocate { .. } => ActionKind::Deallocate,
            Action::HeapWrite { .. } => ActionKind::HeapWrite,
            Action::BufferWrite { .. } => ActionKind::BufferWrite,
            Action::Bug(_) => ActionKind::BugInvoke,
        }
    }

    pub fn bug(&self) -> Option<BugKind> {
        match self {
            Action::Bug(b) => Some(b.kind()),
            _ => None,
        }
    }

    pub fn value(&self) -> Option<&Value> {
        match self {
            Action::Allocate { size } => Some(size),
            Action::HeapWrite { value, .. }
            | Action::BufferWrite { value, .. }
            | Action::Bug(BugAction::Overflow { value, .. })
            | Action::Bug(BugAction::WriteAfterFree { value, .. })
            | Action::Bug(BugAction::OffByOne { value, .. }) => Some(value),
            Action::Bug(BugAction::ArbitraryFree { target }) => Some(target),
            Action::Deallocate { .. }
            | Action::Bug(BugAction::DoubleFree { .. })
            | Action::Bug(BugAction::OffByOneNull { .. }) => None,
        }
    }
}

/// Decoded trace: the actions plus the exact bytes each one consumed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceProgram {
    pub actions: Vec<Action>,
    pub source: Vec<u8>,
    pub spans: Vec<Range<usize>>,
}

impl TraceProgram {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Source bytes of the first `n` actions.
    pub fn prefix_bytes(&self, n: usize) -> &[u8] {
        match n.min(self.spans.len()) {
            0 => &[],
            n => &self.source[..self.spans[n - 1].end],
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum ValueClass {
    Integer,
    Address,
    Any,
}

fn known_roles(spec: &ModelSpec) -> Vec<Knowledge> {
    Knowledge::ALL.into_iter().filter(|k| spec.knows(*k)).collect()
}

fn role_pairs(spec: &ModelSpec) -> Vec<(Knowledge, Knowledge)> {
    let roles = known_roles(spec);
    let mut pairs = Vec::new();
    for a in &roles {
        for b in &roles {
            if a != b {
                pairs.push((*a, *b));
            }
        }
    }
    pairs
}

fn strategy_list(spec: &ModelSpec, class: ValueClass) -> Vec<StrategyId> {
    STRATEGY_ORDER
        .into_iter()
        .filter(|s| match class {
            ValueClass::Integer => !s.is_address(),
            ValueClass::Address => s.is_address(),
            ValueClass::Any => true,
        })
        .filter(|s| s.available(spec))
        .collect()
}

fn pick<T: Copy>(list: &[T], byte: u8) -> T {
    list[byte as usize % list.len()]
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn byte(&mut self) -> Option<u8> {
        let b = *self.bytes.get(self.pos)?;
        self.pos += 1;
        Some(b)
    }

    fn u16(&mut self) -> Option<u16> {
        Some(u16::from_le_bytes([self.byte()?, self.byte()?]))
    }
}

struct Decoder {
    actions: Vec<ActionKind>,
    bugs: Vec<BugKind>,
    integer: Vec<StrategyId>,
    address: Vec<StrategyId>,
    any: Vec<StrategyId>,
    pairs: Vec<(Knowledge, Knowledge)>,
    pool: Vec<SizePick>,
}

impl Decoder {
    fn new(spec: &ModelSpec) -> Self {
        Decoder {
            actions: spec.enabled_actions(),
            bugs: spec.enabled_bugs(),
            integer: strategy_list(spec, ValueClass::Integer),
            address: strategy_list(spec, ValueClass::Address),
            any: strategy_list(spec, ValueClass::Any),
            pairs: role_pairs(spec),
            pool: spec.size_pool(),
        }
    }

    fn value(&self, r: &mut Reader, class: ValueClass) -> Option<Value> {
        let list = match class {
            ValueClass::Integer => &self.integer,
            ValueClass::Address => &self.address,
            ValueClass::Any => &self.any,
        };
        let id = pick(list, r.byte()?);
        let strategy = match id {
            StrategyId::I1 => Strategy::Constant(r.byte()? % CONSTANTS.len() as u8),
            StrategyId::I2 => {
                let (a, b) = pick(&self.pairs, r.byte()?);
                Strategy::PointerOffset(a, b)
            }
            StrategyId::I3 => {
                let group = pick(&self.pool, r.byte()?);
                Strategy::GroupSize(group, r.u16()?)
            }
            StrategyId::I4 => Strategy::RequestSize(r.byte()?),
            StrategyId::I5 => Strategy::ChunkSize(r.byte()?),
            StrategyId::P1 => Strategy::Null,
            StrategyId::P2 => Strategy::BufferAddr,
            StrategyId::P3 => Strategy::HeapAddr,
            StrategyId::P4 => Strategy::ContainerAddr,
        };
        let transform = match id.transform_modes() {
            0 => Transform::None,
            modes => match r.byte()? % modes {
                0 => Transform::None,
                1 if modes == 3 => {
                    let a = pick(&MULTIPLIERS, r.byte()?);
                    Transform::Linear { a, b: r.byte()? as i8 }
                }
                _ => Transform::Shift { b: r.byte()? as i8 },
            },
        };
        Some(Value { strategy, transform })
    }

    fn action(&self, r: &mut Reader) -> Option<Action> {
        let kind = pick(&self.actions, r.byte()?);
        Some(match kind {
            ActionKind::Allocate => Action::Allocate { size: self.value(r, ValueClass::Integer)? },
            ActionKind::Deallocate => Action::Deallocate { chunk: r.byte()? },
            ActionKind::HeapWrite => Action::HeapWrite {
                chunk: r.byte()?,
                slot: r.byte()? % SLOTS,
                value: self.value(r, ValueClass::Any)?,
            },
            ActionKind::BufferWrite => Action::BufferWrite {
                offset: buffer_offset(r.u16()?),
                value: self.value(r, ValueClass::Any)?,
            },
            ActionKind::BugInvoke => {
                let bug = pick(&self.bugs, r.byte()?);
                Action::Bug(match bug {
                    BugKind::Overflow => BugAction::Overflow {
                        chunk: r.byte()?,
                        words: 1 + r.byte()? % MAX_OVERFLOW_WORDS,
                        value: self.value(r, ValueClass::Any)?,
                    },
                    BugKind::WriteAfterFree => BugAction::WriteAfterFree {
                        chunk: r.byte()?,
                        slot: r.byte()? % SLOTS,
                        value: self.value(r, ValueClass::Any)?,
                    },
                    BugKind::ArbitraryFree => BugAction::ArbitraryFree {
                        target: self.value(r, ValueClass::Address)?,
                    },
                    BugKind::DoubleFree => BugAction::DoubleFree { chunk: r.byte()? },
                    BugKind::OffByOne => BugAction::OffByOne {
                        chunk: r.byte()?,
                        value: self.value(r, ValueClass::Any)?,
                    },
                    BugKind::OffByOneNull => BugAction::OffByOneNull { chunk: r.byte()? },
                })
            }
        })
    }
}

fn buffer_offset(raw: u16) -> u16 {
    ((raw as u64 % (BUFFER_SIZE - WORD)) & !(WORD - 1)) as u16
}

/// Decodes with the default action cap.
pub fn decode(bytes: &[u8], spec: &ModelSpec) -> TraceProgram {
    decode_with_cap(bytes, spec, DEFAULT_MAX_ACTIONS)
}

pub fn decode_with_cap(bytes: &[u8], spec: &ModelSpec, max_actions: usize) -> TraceProgram {
    let decoder = Decoder::new(spec);
    let mut reader = Reader { bytes, pos: 0 };
    let mut actions = Vec::new();
    let mut spans = Vec::new();
    while actions.len() < max_actions && reader.pos < bytes.len() {
        let start = reader.pos;
        match decoder.action(&mut reader) {
            Some(action) => {
                actions.push(action);
                spans.push(start..reader.pos);
            }
            None => break,
        }
    }
    let consumed = spans.last().map_or(0, |s| s.end);
    TraceProgram { actions, source: bytes[..consumed].to_vec(), spans }
}

struct Encoder {
    decoder: Decoder,
    out: Vec<u8>,
}

impl Encoder {
    fn index_of<T: PartialEq>(list: &[T], item: &T) -> Option<u8> {
        list.iter().position(|x| x == item).map(|i| i as u8)
    }

    fn value(&mut self, value: &Value, class: ValueClass) -> Option<()> {
        let list = match class {
            ValueClass::Integer => &self.decoder.integer,
            ValueClass::Address => &self.decoder.address,
            ValueClass::Any => &self.decoder.any,
        };
        let id = value.strategy.id();
        let selector = Self::index_of(list, &id)?;
        self.out.push(selector);
        match value.strategy {
            Strategy::Constant(i) if (i as usize) < CONSTANTS.len() => self.out.push(i),
            Strategy::Constant(_) => return None,
            Strategy::PointerOffset(a, b) => {
                let i = Self::index_of(&self.decoder.pairs, &(a, b))?;
                self.out.push(i);
            }
            Strategy::GroupSize(group, offset) => {
                let i = Self::index_of(&self.decoder.pool, &group)?;
                self.out.push(i);
                self.out.extend_from_slice(&offset.to_le_bytes());
            }
            Strategy::RequestSize(c) | Strategy::ChunkSize(c) => self.out.push(c),
            Strategy::Null | Strategy::BufferAddr | Strategy::HeapAddr | Strategy::ContainerAddr => {}
        }
        match (id.transform_modes(), value.transform) {
            (0, Transform::None) => {}
            (0, _) => return None,
            (_, Transform::None) => self.out.push(0),
            (3, Transform::Linear { a, b }) => {
                let ai = Self::index_of(&MULTIPLIERS, &a)?;
                self.out.extend_from_slice(&[1, ai, b as u8]);
            }
            (_, Transform::Linear { .. }) => return None,
            (modes, Transform::Shift { b }) => self.out.extend_from_slice(&[modes - 1, b as u8]),
        }
        Some(())
    }

    fn action(&mut self, action: &Action) -> Option<()> {
        let kind = Self::index_of(&self.decoder.actions, &action.kind())?;
        self.out.push(kind);
        match action {
            Action::Allocate { size } => self.value(size, ValueClass::Integer)?,
            Action::Deallocate { chunk } => self.out.push(*chunk),
            Action::HeapWrite { chunk, slot, value } => {
                if *slot >= SLOTS {
                    return None;
                }
                self.out.extend_from_slice(&[*chunk, *slot]);
                self.value(value, ValueClass::Any)?;
            }
            Action::BufferWrite { offset, value } => {
                if buffer_offset(*offset) != *offset {
                    return None;
                }
                self.out.extend_from_slice(&offset.to_le_bytes());
                self.value(value, ValueClass::Any)?;
            }
            Action::Bug(bug) => {
                let b = Self::index_of(&self.decoder.bugs, &bug.kind())?;
                self.out.push(b);
                match bug {
                    BugAction::Overflow { chunk, words, value } => {
                        if !(1..=MAX_OVERFLOW_WORDS).contains(words) {
                            return None;
                        }
                        self.out.extend_from_slice(&[*chunk, words - 1]);
                        self.value(value, ValueClass::Any)?;
                    }
                    BugAction::WriteAfterFree { chunk, slot, value } => {
                        if *slot >= SLOTS {
                            return None;
                        }
                        self.out.extend_from_slice(&[*chunk, *slot]);
                        self.value(value, ValueClass::Any)?;
                    }
                    BugAction::ArbitraryFree { target } => self.value(target, ValueClass::Address)?,
                    BugAction::DoubleFree { chunk } | BugAction::OffByOneNull { chunk } => self.out.push(*chunk),
                    BugAction::OffByOne { chunk, value } => {
                        self.out.push(*chunk);
                        self.value(value, ValueClass::Any)?;
                    }
                }
            }
        }
        Some(())
    }
}

/// Encodes actions so that `decode(encode(actions))` reproduces them.
pub fn encode(actions: &[Action], spec: &ModelSpec) -> Result<Vec<u8>, CodecError> {
    let mut enc = Encoder { decoder: Decoder::new(spec), out: Vec::new() };
    for (index, action) in actions.iter().enumerate() {
        enc.action(action)
            .ok_or(CodecError::Unrepresentable { index, kind: action.kind() })?;
    }
    Ok(enc.out)
}

/// Execution-time state a value strategy reads.
pub trait ValueContext {
    fn record_count(&self) -> usize;
    fn request_size(&self, record: usize) -> u64;
    fn usable_size(&self, record: usize) -> u64;
    /// Record index and base address of the most recent allocation.
    fn last_allocation(&self) -> Option<(usize, u64)>;
    fn buffer_base(&self) -> u64;
    fn container_base(&self) -> u64;
}

/// A concrete word plus the record it was derived from, if any.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Materialized {
    pub word: u64,
    pub record: Option<u32>,
}

impl Materialized {
    const FALLBACK: Materialized = Materialized { word: 0, record: None };
}

/// Turns a symbolic value into a word. Strategies that need a record when
/// none exists fall back to 0.
pub fn materialize(value: &Value, ctx: &impl ValueContext) -> Materialized {
    let indexed = |c: u8| match ctx.record_count() {
        0 => None,
        n => Some(c as usize % n),
    };
    let role = |k: Knowledge| match k {
        Knowledge::Heap => ctx.last_allocation().map(|(i, base)| (base, Some(i as u32))),
        Knowledge::Buffer => Some((ctx.buffer_base(), None)),
        Knowledge::Container => Some((ctx.container_base(), None)),
    };
    let (base, record) = match value.strategy {
        Strategy::Constant(i) => (CONSTANTS[i as usize % CONSTANTS.len()], None),
        Strategy::PointerOffset(a, b) => match (role(a), role(b)) {
            (Some((x, rx)), Some((y, ry))) => (x.wrapping_sub(y), rx.or(ry)),
            _ => return Materialized::FALLBACK,
        },
        Strategy::GroupSize(group, offset) => (group.size_at(offset), None),
        Strategy::RequestSize(c) => match indexed(c) {
            Some(i) => (ctx.request_size(i), Some(i as u32)),
            None => return Materialized::FALLBACK,
        },
        Strategy::ChunkSize(c) => match indexed(c) {
            Some(i) => (ctx.usable_size(i), Some(i as u32)),
            None => return Materialized::FALLBACK,
        },
        Strategy::Null => return Materialized::FALLBACK,
        Strategy::BufferAddr => (ctx.buffer_base(), None),
        Strategy::HeapAddr => match ctx.last_allocation() {
            Some((i, base)) => (base, Some(i as u32)),
            None => return Materialized::FALLBACK,
        },
        Strategy::ContainerAddr => (ctx.container_base(), None),
    };
    let mut word = value.transform.apply(base);
    if value.strategy.is_address_typed() {
        word &= !(WORD - 1);
    }
    Materialized { word, record }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SizeGroup;

    struct Ctx {
        records: Vec<(u64, u64, u64)>,
    }

    impl ValueContext for Ctx {
        fn record_count(&self) -> usize {
            self.records.len()
        }
        fn request_size(&self, i: usize) -> u64 {
            self.records[i].1
        }
        fn usable_size(&self, i: usize) -> u64 {
            self.records[i].2
        }
        fn last_allocation(&self) -> Option<(usize, u64)> {
            self.records.last().map(|r| (self.records.len() - 1, r.0))
        }
        fn buffer_base(&self) -> u64 {
            0x7000_0000
        }
        fn container_base(&self) -> u64 {
            0x6000_0000
        }
    }

    fn empty() -> Ctx {
        Ctx { records: vec![] }
    }

    #[test]
    fn empty_input_decodes_to_empty_program() {
        let p = decode(&[], &ModelSpec::default());
        assert!(p.is_empty());
        assert!(p.source.is_empty());
    }

    #[test]
    fn truncated_allocate_is_dropped() {
        // 0x05 % 5 == 0 selects Allocate, but no size bytes follow.
        assert!(decode(&[0x05], &ModelSpec::default()).is_empty());
    }

    #[test]
    fn single_deallocate() {
        let spec = ModelSpec::default();
        let p = decode(&[0x01, 0x00], &spec);
        assert_eq!(p.actions, vec![Action::Deallocate { chunk: 0 }]);
        assert_eq!(encode(&p.actions, &spec).unwrap(), vec![0x01, 0x00]);
        assert!(encode(&[], &spec).unwrap().is_empty());
    }

    #[test]
    fn allocate_constant_block() {
        // Allocate, selector 0 (I1), constant index 5 (32).
        let p = decode(&[0x00, 0x00, 0x05], &ModelSpec::default());
        assert_eq!(p.actions, vec![Action::Allocate { size: Value::plain(Strategy::Constant(5)) }]);
        assert_eq!(materialize(p.actions[0].value().unwrap(), &empty()).word, 32);
    }

    #[test]
    fn action_cap_is_honoured() {
        let bytes: Vec<u8> = std::iter::repeat([0x01, 0x00]).take(300).flatten().collect();
        assert_eq!(decode(&bytes, &ModelSpec::default()).len(), DEFAULT_MAX_ACTIONS);
        assert_eq!(decode_with_cap(&bytes, &ModelSpec::default(), 12).len(), 12);
    }

    #[test]
    fn disabled_kinds_are_not_decoded() {
        let spec = ModelSpec::parse("actions = allocate, deallocate").unwrap();
        // 0x03 would be BufferWrite under the default spec; here 3 % 2 == 1.
        let p = decode(&[0x03, 0x07], &spec);
        assert_eq!(p.actions, vec![Action::Deallocate { chunk: 7 }]);
        let err = encode(&[Action::BufferWrite { offset: 0, value: Value::plain(Strategy::Null) }], &spec);
        assert!(matches!(err, Err(CodecError::Unrepresentable { index: 0, .. })));
    }

    #[test]
    fn knowledge_gates_strategies() {
        let spec = ModelSpec::parse("knowledge = BA").unwrap();
        let action = Action::HeapWrite { chunk: 0, slot: 0, value: Value::plain(Strategy::ContainerAddr) };
        assert!(encode(&[action], &spec).is_err());
        let i2 = Action::HeapWrite {
            chunk: 0,
            slot: 0,
            value: Value::plain(Strategy::PointerOffset(Knowledge::Buffer, Knowledge::Heap)),
        };
        assert!(encode(&[i2], &spec).is_err());
    }

    #[test]
    fn linear_only_on_chunk_sizes() {
        let spec = ModelSpec::default();
        let bad = Action::HeapWrite { chunk: 0, slot: 0, value: Value::linear(Strategy::BufferAddr, 2, 1) };
        assert!(encode(&[bad], &spec).is_err());
        let good = Action::Allocate { size: Value::linear(Strategy::ChunkSize(3), 8, -2) };
        let bytes = encode(&[good], &spec).unwrap();
        assert_eq!(decode(&bytes, &spec).actions, vec![good]);
    }

    #[test]
    fn materialize_examples() {
        assert_eq!(materialize(&Value::plain(Strategy::Null), &empty()).word, 0);
        let g2 = Value::plain(Strategy::GroupSize(SizePick::Group(SizeGroup::new(2).unwrap()), 0));
        assert_eq!(materialize(&g2, &empty()).word, 1024);
        let ctx = Ctx { records: vec![(0x1010, 20, 24)] };
        let i5 = Value::linear(Strategy::ChunkSize(0), 2, 1);
        assert_eq!(materialize(&i5, &ctx), Materialized { word: 56, record: Some(0) });
    }

    #[test]
    fn materialize_fallbacks_and_modulo() {
        for s in [Strategy::RequestSize(3), Strategy::ChunkSize(0), Strategy::HeapAddr] {
            assert_eq!(materialize(&Value::shifted(s, 4), &empty()), Materialized::FALLBACK);
        }
        let ctx = Ctx { records: vec![(0x1010, 20, 24), (0x1030, 40, 40)] };
        // index 5 % 2 == 1
        assert_eq!(materialize(&Value::plain(Strategy::RequestSize(5)), &ctx).word, 40);
        let p3 = Value::shifted(Strategy::HeapAddr, -2);
        assert_eq!(materialize(&p3, &ctx), Materialized { word: 0x1020, record: Some(1) });
        let i2 = Value::plain(Strategy::PointerOffset(Knowledge::Buffer, Knowledge::Container));
        assert_eq!(materialize(&i2, &ctx).word, 0x1000_0000);
        let p4 = Value::shifted(Strategy::ContainerAddr, -3);
        assert_eq!(materialize(&p4, &ctx).word, 0x6000_0000 - 24);
    }

    #[test]
    fn buffer_offsets_are_word_aligned_and_in_range() {
        for raw in [0u16, 7, 4087, 4088, 4095, u16::MAX] {
            let off = buffer_offset(raw);
            assert_eq!(off % 8, 0);
            assert!(off as u64 + WORD <= BUFFER_SIZE);
        }
    }
}
