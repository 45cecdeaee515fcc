//! Campaign vocabulary: action, bug and impact kinds, attacker knowledge,
//! size groups and the [`ModelSpec`] that restricts what a campaign may do.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::SpecError;

/// The five heap actions, in canonical codec order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ActionKind {
    Allocate,
    Deallocate,
    HeapWrite,
    BufferWrite,
    BugInvoke,
}

impl ActionKind {
    pub const ALL: [ActionKind; 5] = [
        ActionKind::Allocate,
        ActionKind::Deallocate,
        ActionKind::HeapWrite,
        ActionKind::BufferWrite,
        ActionKind::BugInvoke,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ActionKind::Allocate => "allocate",
            ActionKind::Deallocate => "deallocate",
            ActionKind::HeapWrite => "heap_write",
            ActionKind::BufferWrite => "buffer_write",
            ActionKind::BugInvoke => "bug",
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "allocate" | "alloc" | "malloc" => ActionKind::Allocate,
            "deallocate" | "dealloc" | "free" => ActionKind::Deallocate,
            "heap_write" | "heapwrite" => ActionKind::HeapWrite,
            "buffer_write" | "bufferwrite" => ActionKind::BufferWrite,
            "bug" | "bug_invoke" | "buginvoke" => ActionKind::BugInvoke,
            _ => return Err(SpecError::UnknownValue("actions", s.to_string())),
        })
    }
}

/// Heap bugs an attacker may trigger, in canonical codec order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum BugKind {
    Overflow,
    WriteAfterFree,
    ArbitraryFree,
    DoubleFree,
    OffByOne,
    OffByOneNull,
}

impl BugKind {
    pub const ALL: [BugKind; 6] = [
        BugKind::Overflow,
        BugKind::WriteAfterFree,
        BugKind::ArbitraryFree,
        BugKind::DoubleFree,
        BugKind::OffByOne,
        BugKind::OffByOneNull,
    ];

    pub fn code(self) -> &'static str {
        match self {
            BugKind::Overflow => "OF",
            BugKind::WriteAfterFree => "WF",
            BugKind::ArbitraryFree => "AF",
            BugKind::DoubleFree => "FF",
            BugKind::OffByOne => "O1",
            BugKind::OffByOneNull => "O1N",
        }
    }

    pub fn description(self) -> &'static str {
        match self {
            BugKind::Overflow => "overflow",
            BugKind::WriteAfterFree => "write-after-free",
            BugKind::ArbitraryFree => "arbitrary free",
            BugKind::DoubleFree => "double free",
            BugKind::OffByOne => "off-by-one",
            BugKind::OffByOneNull => "off-by-one NULL",
        }
    }

    /// Bugs whose effect is a deallocation; divergence they cause is a
    /// restricted write.
    pub fn is_deallocation(self) -> bool {
        matches!(self, BugKind::ArbitraryFree | BugKind::DoubleFree)
    }
}

impl fmt::Display for BugKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for BugKind {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        BugKind::ALL
            .into_iter()
            .find(|b| b.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| SpecError::UnknownValue("bugs", s.to_string()))
    }
}

/// Exploitation impact classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ImpactClass {
    ArbitraryChunk,
    OverlappingChunk,
    ArbitraryWrite,
    RestrictedWrite,
}

impl ImpactClass {
    pub const ALL: [ImpactClass; 4] = [
        ImpactClass::ArbitraryChunk,
        ImpactClass::OverlappingChunk,
        ImpactClass::ArbitraryWrite,
        ImpactClass::RestrictedWrite,
    ];

    pub fn code(self) -> &'static str {
        match self {
            ImpactClass::ArbitraryChunk => "AC",
            ImpactClass::OverlappingChunk => "OC",
            ImpactClass::ArbitraryWrite => "AW",
            ImpactClass::RestrictedWrite => "RW",
        }
    }

    /// Rank used to pick a report's primary class: AC > AW > OC > RW.
    pub fn severity(self) -> u8 {
        match self {
            ImpactClass::ArbitraryChunk => 4,
            ImpactClass::ArbitraryWrite => 3,
            ImpactClass::OverlappingChunk => 2,
            ImpactClass::RestrictedWrite => 1,
        }
    }
}

impl fmt::Display for ImpactClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

impl FromStr for ImpactClass {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ImpactClass::ALL
            .into_iter()
            .find(|c| c.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| SpecError::UnknownValue("impacts", s.to_string()))
    }
}

/// Attacker-visible region where an impact was observed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Site {
    Container,
    Buffer,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Container => "container",
            Site::Buffer => "buffer",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Site {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "container" => Ok(Site::Container),
            "buffer" => Ok(Site::Buffer),
            _ => Err(SpecError::UnknownValue("site", s.to_string())),
        }
    }
}

/// One address the attacker is assumed to know.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Knowledge {
    /// A heap address (HA).
    Heap,
    /// The global buffer address (BA).
    Buffer,
    /// The heap container address (CA).
    Container,
}

impl Knowledge {
    pub const ALL: [Knowledge; 3] = [Knowledge::Heap, Knowledge::Buffer, Knowledge::Container];

    pub fn code(self) -> &'static str {
        match self {
            Knowledge::Heap => "HA",
            Knowledge::Buffer => "BA",
            Knowledge::Container => "CA",
        }
    }
}

impl FromStr for Knowledge {
    type Err = SpecError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Knowledge::ALL
            .into_iter()
            .find(|k| k.code().eq_ignore_ascii_case(s))
            .ok_or_else(|| SpecError::UnknownValue("knowledge", s.to_string()))
    }
}

/// Allocation size groups: `[1, 32)`, `[32, 1024)`, `[1024, 32768)`,
/// `[32768, 2^20)` and the closing singleton `{2^20}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SizeGroup(u8);

impl SizeGroup {
    pub const COUNT: u8 = 5;

    pub fn new(index: u8) -> Option<Self> {
        (index < Self::COUNT).then_some(SizeGroup(index))
    }

    pub fn index(self) -> u8 {
        self.0
    }

    /// Half-open byte interval `[lo, hi)` covered by the group.
    pub fn bounds(self) -> (u64, u64) {
        match self.0 {
            4 => (1 << 20, (1 << 20) + 1),
            i => (1 << (5 * i as u64), 1 << (5 * (i as u64 + 1))),
        }
    }

    pub fn contains(self, size: u64) -> bool {
        let (lo, hi) = self.bounds();
        (lo..hi).contains(&size)
    }
}

/// Restrictions for a campaign. Impacts only filter what gets reported.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub actions: BTreeSet<ActionKind>,
    pub bugs: BTreeSet<BugKind>,
    pub impacts: BTreeSet<ImpactClass>,
    pub size_groups: BTreeSet<SizeGroup>,
    pub sizes: Vec<u64>,
    pub knowledge: BTreeSet<Knowledge>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            actions: ActionKind::ALL.into_iter().collect(),
            bugs: BugKind::ALL.into_iter().collect(),
            impacts: ImpactClass::ALL.into_iter().collect(),
            size_groups: (0..SizeGroup::COUNT).filter_map(SizeGroup::new).collect(),
            sizes: Vec::new(),
            knowledge: Knowledge::ALL.into_iter().collect(),
        }
    }
}

/// A size the I3 strategy can pick from: a whole group or an explicit size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SizePick {
    Group(SizeGroup),
    Exact(u64),
}

impl SizePick {
    /// Size for a 16-bit offset, spread evenly across the group.
    pub fn size_at(self, offset: u16) -> u64 {
        match self {
            SizePick::Group(g) => {
                let (lo, hi) = g.bounds();
                lo + (((hi - lo) as u128 * offset as u128) >> 16) as u64
            }
            SizePick::Exact(size) => size,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.enabled_actions().is_empty() {
            return Err(SpecError::NoActions);
        }
        Ok(())
    }

    /// Enabled actions in canonical order. Bug invocation counts as disabled
    /// when no bug is allowed.
    pub fn enabled_actions(&self) -> Vec<ActionKind> {
        self.actions
            .iter()
            .copied()
            .filter(|a| *a != ActionKind::BugInvoke || !self.bugs.is_empty())
            .collect()
    }

    pub fn enabled_bugs(&self) -> Vec<BugKind> {
        self.bugs.iter().copied().collect()
    }

    pub fn knows(&self, k: Knowledge) -> bool {
        self.knowledge.contains(&k)
    }

    /// Whether allocation sizes are restricted at all.
    pub fn restricts_sizes(&self) -> bool {
        self.size_groups.len() < SizeGroup::COUNT as usize || !self.sizes.is_empty()
    }

    /// Whether an allocation of `size` bytes is permitted.
    pub fn allows_size(&self, size: u64) -> bool {
        if !self.restricts_sizes() {
            return true;
        }
        self.size_groups.iter().any(|g| g.contains(size)) || self.sizes.contains(&size)
    }

    /// Picks available to the I3 strategy: enabled groups, then explicit sizes.
    pub fn size_pool(&self) -> Vec<SizePick> {
        let mut pool: Vec<SizePick> = self.size_groups.iter().map(|g| SizePick::Group(*g)).collect();
        for size in &self.sizes {
            let pick = SizePick::Exact(*size);
            if !pool.contains(&pick) {
                pool.push(pick);
            }
        }
        pool
    }

    /// Parses the `key = value[,value...]` text format.
    pub fn parse(text: &str) -> Result<Self, SpecError> {
        let mut spec = ModelSpec::default();
        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| SpecError::Syntax(lineno + 1, raw.to_string()))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(SpecError::DuplicateKey(key.to_string()));
            }
            let value = value.trim();
            match key {
                "actions" => spec.actions = parse_set(value, &ActionKind::ALL)?,
                "bugs" => spec.bugs = parse_set(value, &BugKind::ALL)?,
                "impacts" => spec.impacts = parse_set(value, &ImpactClass::ALL)?,
                "knowledge" => spec.knowledge = parse_set(value, &Knowledge::ALL)?,
                "size_groups" => {
                    let all: Vec<SizeGroup> = (0..SizeGroup::COUNT).filter_map(SizeGroup::new).collect();
                    spec.size_groups = if value == "*" {
                        all.into_iter().collect()
                    } else {
                        items(value)
                            .map(|v| {
                                v.parse::<u8>()
                                    .ok()
                                    .and_then(SizeGroup::new)
                                    .ok_or_else(|| SpecError::UnknownValue("size_groups", v.to_string()))
                            })
                            .collect::<Result<_, _>>()?
                    };
                }
                "sizes" => {
                    spec.sizes = if value == "*" {
                        Vec::new()
                    } else {
                        items(value)
                            .map(|v| parse_u64(v).ok_or_else(|| SpecError::UnknownValue("sizes", v.to_string())))
                            .collect::<Result<_, _>>()?
                    };
                }
                other => return Err(SpecError::UnknownKey(other.to_string())),
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    /// Single-line form (`key=v,v;key=v...`) used inside reports.
    pub fn to_compact(&self) -> String {
        self.to_text().trim_end().replace(" = ", "=").replace('\n', ";")
    }

    pub fn from_compact(line: &str) -> Result<Self, SpecError> {
        Self::parse(&line.replace(';', "\n"))
    }

    /// Text form accepted by [`ModelSpec::parse`].
    pub fn to_text(&self) -> String {
        fn join<I: IntoIterator<Item = String>>(it: I) -> String {
            it.into_iter().collect::<Vec<_>>().join(",")
        }
        format!(
            "actions = {}\nbugs = {}\nimpacts = {}\nsize_groups = {}\nsizes = {}\nknowledge = {}\n",
            join(self.actions.iter().map(|a| a.name().to_string())),
            join(self.bugs.iter().map(|b| b.code().to_string())),
            join(self.impacts.iter().map(|i| i.code().to_string())),
            join(self.size_groups.iter().map(|g| g.index().to_string())),
            join(self.sizes.iter().map(|s| s.to_string())),
            join(self.knowledge.iter().map(|k| k.code().to_string())),
        )
    }
}

fn items(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|v| !v.is_empty())
}

fn parse_set<T>(value: &str, all: &[T]) -> Result<BTreeSet<T>, SpecError>
where
    T: FromStr<Err = SpecError> + Ord + Copy,
{
    if value == "*" {
        return Ok(all.iter().copied().collect());
    }
    items(value).map(str::parse).collect()
}

pub(crate) fn parse_u64(v: &str) -> Option<u64> {
    match v.strip_prefix("0x").or_else(|| v.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(hex, 16).ok(),
        None => v.parse().ok(),
    }
}
