use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use heapscout::codec::decode;
use heapscout::engine::{execute, Observer, CONTAINER_SIZE};
use heapscout::model::{BugKind, ModelSpec};
use heapscout::target::HeapTarget;
use proptest::collection::vec;
use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

/// Chunk map shared between the mock target and the write auditor.
type Chunks = Rc<RefCell<BTreeMap<u64, (u64, bool)>>>;

/// Bump allocator over a private pool with slack at the end, so bug writes
/// past the last chunk stay in owned memory.
struct Pool {
    words: Vec<u64>,
    next: usize,
    chunks: Chunks,
}

impl Pool {
    fn new(chunks: Chunks) -> Self {
        Pool { words: vec![0; 1 << 16], next: 2, chunks }
    }
}

impl HeapTarget for Pool {
    fn id(&self) -> &str {
        "pool"
    }

    fn allocate(&mut self, size: u64) -> u64 {
        let words = (size.min(1 << 20) as usize).div_ceil(8).max(1) + 2;
        if size > 1 << 20 || self.next + words + 64 > self.words.len() {
            return 0;
        }
        let addr = self.words.as_ptr() as u64 + self.next as u64 * 8;
        self.next += words;
        self.chunks.borrow_mut().insert(addr, ((size + 7) & !7, true));
        addr
    }

    fn deallocate(&mut self, addr: u64) {
        if let Some(c) = self.chunks.borrow_mut().get_mut(&addr) {
            c.1 = false;
        }
    }

    fn usable_size(&self, _addr: u64, request: u64) -> u64 {
        (request + 7) & !7
    }
}

/// Records every engine write and whether it landed inside a Live chunk's
/// usable span at the time it happened.
struct Auditor {
    chunks: Chunks,
    writes: Vec<(u64, u64, bool)>,
}

impl Observer for Auditor {
    fn on_write(&mut self, addr: u64, len: u64) {
        let chunks = self.chunks.borrow();
        let in_chunk = chunks
            .range(..=addr)
            .next_back()
            .is_some_and(|(base, (usable, live))| *live && addr + len <= base + usable);
        self.writes.push((addr, len, in_chunk));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn writes_stay_legitimate_without_bugs(bytes in vec(any::<u8>(), 0..800), salt in any::<u64>()) {
        let spec = ModelSpec::parse("bugs =").unwrap();
        let chunks = Chunks::default();
        let mut target = Pool::new(chunks.clone());
        let mut audit = Auditor { chunks, writes: vec![] };
        let e = execute(&decode(&bytes, &spec), &mut target, &spec, salt, &mut audit);
        prop_assert!(e.events.is_empty());
        let inside = |addr: u64, len: u64, base: u64, size: u64| addr >= base && addr + len <= base + size;
        for (addr, len, in_chunk) in audit.writes {
            prop_assert!(
                in_chunk
                    || inside(addr, len, e.layout.container, CONTAINER_SIZE)
                    || inside(addr, len, e.layout.buffer, 4096),
                "write {:#x}+{}", addr, len
            );
        }
    }

    #[test]
    fn at_most_one_bug_kind_runs(bytes in vec(any::<u8>(), 0..800), salt in any::<u64>()) {
        let spec = ModelSpec::default();
        let chunks = Chunks::default();
        let mut target = Pool::new(chunks);
        let program = decode(&bytes, &spec);
        let e = execute(&program, &mut target, &spec, salt, &mut heapscout::engine::Silent);
        let kinds: std::collections::BTreeSet<BugKind> =
            e.log.iter().filter(|l| l.executed()).filter_map(|l| l.action.bug()).collect();
        prop_assert!(kinds.len() <= 1);
        prop_assert!(kinds.iter().next().copied() == e.committed_bug);
    }
}
