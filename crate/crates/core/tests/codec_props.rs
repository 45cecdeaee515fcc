use heapscout::codec::{decode, encode, materialize, Action, BugAction, Strategy, Value, ValueContext, WORD};
use heapscout::model::{ActionKind, BugKind, ImpactClass, Knowledge, ModelSpec, SizeGroup, SizePick};
use proptest::prelude::{any, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use proptest::sample::subsequence;
use proptest::strategy::Strategy as _;

fn spec_strategy() -> impl proptest::strategy::Strategy<Value = ModelSpec> {
    (
        subsequence(ActionKind::ALL.to_vec(), 1..=5),
        subsequence(BugKind::ALL.to_vec(), 0..=6),
        subsequence((0..SizeGroup::COUNT).collect::<Vec<_>>(), 0..=5),
        proptest::collection::vec(1u64..5000, 0..3),
        subsequence(Knowledge::ALL.to_vec(), 0..=3),
    )
        .prop_filter_map("needs a decodable action", |(actions, bugs, groups, sizes, knowledge)| {
            let spec = ModelSpec {
                actions: actions.into_iter().collect(),
                bugs: bugs.into_iter().collect(),
                impacts: ImpactClass::ALL.into_iter().collect(),
                size_groups: groups.into_iter().filter_map(SizeGroup::new).collect(),
                sizes,
                knowledge: knowledge.into_iter().collect(),
            };
            spec.validate().ok().map(|_| spec)
        })
}

struct Ctx(Vec<(u64, u64, u64)>);

impl ValueContext for Ctx {
    fn record_count(&self) -> usize {
        self.0.len()
    }
    fn request_size(&self, i: usize) -> u64 {
        self.0[i].1
    }
    fn usable_size(&self, i: usize) -> u64 {
        self.0[i].2
    }
    fn last_allocation(&self) -> Option<(usize, u64)> {
        self.0.last().map(|r| (self.0.len() - 1, r.0))
    }
    fn buffer_base(&self) -> u64 {
        0x3000_0001_0000
    }
    fn container_base(&self) -> u64 {
        0x2000_0002_0000
    }
}

fn values(action: &Action) -> Vec<Value> {
    action.value().copied().into_iter().collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn decode_is_deterministic(bytes in proptest::collection::vec(any::<u8>(), 0..600), spec in spec_strategy()) {
        prop_assert_eq!(decode(&bytes, &spec), decode(&bytes, &spec));
    }

    #[test]
    fn encode_round_trips(bytes in proptest::collection::vec(any::<u8>(), 0..600), spec in spec_strategy()) {
        let program = decode(&bytes, &spec);
        let canonical = encode(&program.actions, &spec).unwrap();
        prop_assert_eq!(&decode(&canonical, &spec).actions, &program.actions);
        prop_assert_eq!(encode(&decode(&canonical, &spec).actions, &spec).unwrap(), canonical);
    }

    #[test]
    fn spans_tile_the_consumed_prefix(bytes in proptest::collection::vec(any::<u8>(), 0..600), spec in spec_strategy()) {
        let program = decode(&bytes, &spec);
        let mut at = 0;
        for span in &program.spans {
            prop_assert_eq!(span.start, at);
            at = span.end;
        }
        prop_assert_eq!(at, program.source.len());
        prop_assert!(bytes.starts_with(&program.source));
        for n in 0..=program.len() {
            prop_assert_eq!(&decode(program.prefix_bytes(n), &spec).actions[..], &program.actions[..n]);
        }
    }

    #[test]
    fn decoded_programs_respect_the_spec(bytes in proptest::collection::vec(any::<u8>(), 0..600), spec in spec_strategy()) {
        for action in decode(&bytes, &spec).actions {
            prop_assert!(spec.actions.contains(&action.kind()));
            if let Some(bug) = action.bug() {
                prop_assert!(spec.bugs.contains(&bug));
            }
            if let Action::Allocate { size } = action {
                prop_assert!(!matches!(size.strategy, Strategy::Null | Strategy::BufferAddr | Strategy::HeapAddr | Strategy::ContainerAddr));
            }
            if let Action::Bug(BugAction::ArbitraryFree { target }) = action {
                prop_assert!(matches!(target.strategy, Strategy::Null | Strategy::BufferAddr | Strategy::HeapAddr | Strategy::ContainerAddr));
            }
            for v in values(&action) {
                match v.strategy {
                    Strategy::BufferAddr => prop_assert!(spec.knows(Knowledge::Buffer)),
                    Strategy::HeapAddr => prop_assert!(spec.knows(Knowledge::Heap)),
                    Strategy::ContainerAddr => prop_assert!(spec.knows(Knowledge::Container)),
                    Strategy::PointerOffset(a, b) => {
                        prop_assert!(a != b && spec.knows(a) && spec.knows(b));
                    }
                    Strategy::GroupSize(pick, _) => prop_assert!(spec.size_pool().contains(&pick)),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn address_values_are_word_aligned(
        bytes in proptest::collection::vec(any::<u8>(), 0..400),
        records in proptest::collection::vec((0u64..1 << 40, 0u64..4096, 0u64..4096), 0..8),
    ) {
        let spec = ModelSpec::default();
        let ctx = Ctx(records.iter().map(|(a, r, u)| (a & !15, *r, *u)).collect());
        for action in decode(&bytes, &spec).actions {
            for v in values(&action) {
                if v.strategy.is_address_typed() {
                    prop_assert_eq!(materialize(&v, &ctx).word % WORD, 0);
                }
            }
        }
    }

    #[test]
    fn group_sizes_stay_in_their_group(group in 0..SizeGroup::COUNT, offset in any::<u16>()) {
        let g = SizeGroup::new(group).unwrap();
        prop_assert!(g.contains(SizePick::Group(g).size_at(offset)));
    }
}

#[test]
fn every_group_is_reachable_from_bytes() {
    let spec = ModelSpec::default();
    let ctx = Ctx(vec![]);
    let mut hit = [false; SizeGroup::COUNT as usize];
    for group in 0..=255u8 {
        for hi in [0u8, 0x80, 0xff] {
            // Allocate, selector 2 (I3), group byte, offset LE
            let program = decode(&[0, 2, group, 0, hi], &spec);
            let size = materialize(program.actions[0].value().unwrap(), &ctx).word;
            for g in 0..SizeGroup::COUNT {
                if SizeGroup::new(g).unwrap().contains(size) {
                    hit[g as usize] = true;
                }
            }
        }
    }
    assert!(hit.iter().all(|h| *h), "{hit:?}");
}
