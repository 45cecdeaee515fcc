//! Impact classification: overlap checks at allocation time and shadow
//! comparison of the container and buffer after every action.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::model::{ActionKind, BugKind, ImpactClass, Site};

/// A fixed memory region the attacker can see.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub base: u64,
    pub len: u64,
}

impl Region {
    pub fn end(&self) -> u64 {
        self.base + self.len
    }

    pub fn intersects(&self, base: u64, len: u64) -> bool {
        intervals_intersect(self.base, self.len, base, len)
    }
}

/// Half-open interval intersection that tolerates intervals wrapping past
/// the top of the address space.
pub fn intervals_intersect(a: u64, alen: u64, b: u64, blen: u64) -> bool {
    if alen == 0 || blen == 0 {
        return false;
    }
    let a_end = a as u128 + alen as u128;
    let b_end = b as u128 + blen as u128;
    (a as u128) < b_end && (b as u128) < a_end
}

/// One observed impact.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImpactEvent {
    pub class: ImpactClass,
    pub site: Option<Site>,
    pub action_index: usize,
    pub action: ActionKind,
    pub bug: Option<BugKind>,
}

/// `(class, site)`: what minimization and PoC assertions preserve.
pub type ImpactKey = (ImpactClass, Option<Site>);

impl ImpactEvent {
    pub fn key(&self) -> ImpactKey {
        (self.class, self.site)
    }
}

/// Class of a divergence caused by an action: allocator calls give restricted
/// writes, everything else arbitrary writes.
pub fn divergence_class(action: ActionKind, bug: Option<BugKind>) -> ImpactClass {
    let dealloc_bug = bug.is_some_and(BugKind::is_deallocation);
    match action {
        ActionKind::Allocate | ActionKind::Deallocate => ImpactClass::RestrictedWrite,
        ActionKind::BugInvoke if dealloc_bug => ImpactClass::RestrictedWrite,
        _ => ImpactClass::ArbitraryWrite,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Replica {
    pub base: u64,
    pub size: u64,
    pub live: bool,
}

/// Shadow copies of the container and buffer plus chunk replicas.
#[derive(Debug, Clone)]
pub struct ShadowState {
    container: Region,
    buffer: Region,
    container_shadow: Vec<u8>,
    buffer_shadow: Vec<u8>,
    replicas: Vec<Replica>,
}

impl ShadowState {
    /// Starts with shadows equal to the given region contents.
    pub fn new(container: Region, container_bytes: &[u8], buffer: Region, buffer_bytes: &[u8]) -> Self {
        debug_assert_eq!(container.len as usize, container_bytes.len());
        debug_assert_eq!(buffer.len as usize, buffer_bytes.len());
        ShadowState {
            container,
            buffer,
            container_shadow: container_bytes.to_vec(),
            buffer_shadow: buffer_bytes.to_vec(),
            replicas: Vec::new(),
        }
    }

    pub fn region(&self, site: Site) -> Region {
        match site {
            Site::Container => self.container,
            Site::Buffer => self.buffer,
        }
    }

    pub fn shadow(&self, site: Site) -> &[u8] {
        match site {
            Site::Container => &self.container_shadow,
            Site::Buffer => &self.buffer_shadow,
        }
    }

    pub fn replicas(&self) -> &[Replica] {
        &self.replicas
    }

    /// Copies a legitimately written range of `site` into its shadow.
    pub fn sync(&mut self, site: Site, offset: usize, bytes: &[u8]) {
        let shadow = match site {
            Site::Container => &mut self.container_shadow,
            Site::Buffer => &mut self.buffer_shadow,
        };
        shadow[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    /// Allocation-time verdict for a new chunk `[addr, addr + size)`.
    pub fn check_allocation(&self, addr: u64, size: u64) -> Option<ImpactKey> {
        for site in [Site::Container, Site::Buffer] {
            if self.region(site).intersects(addr, size) {
                return Some((ImpactClass::ArbitraryChunk, Some(site)));
            }
        }
        self.replicas
            .iter()
            .any(|r| r.live && intervals_intersect(r.base, r.size, addr, size))
            .then_some((ImpactClass::OverlappingChunk, None))
    }

    /// Records a chunk replica and returns its index.
    pub fn record_chunk(&mut self, base: u64, size: u64) -> usize {
        self.replicas.push(Replica { base, size, live: true });
        self.replicas.len() - 1
    }

    pub fn set_live(&mut self, replica: usize, live: bool) {
        self.replicas[replica].live = live;
    }

    /// Compares both regions with their shadows, returning the sites that
    /// diverged. Shadows are resynchronized afterwards.
    pub fn check_divergence(&mut self, container: &[u8], buffer: &[u8]) -> Vec<Site> {
        let mut sites = Vec::new();
        if self.container_shadow != container {
            self.container_shadow.copy_from_slice(container);
            sites.push(Site::Container);
        }
        if self.buffer_shadow != buffer {
            self.buffer_shadow.copy_from_slice(buffer);
            sites.push(Site::Buffer);
        }
        sites
    }
}

/// Final outcome of one execution.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Verdict {
    /// First event of each class, in execution order.
    pub events: Vec<ImpactEvent>,
    pub primary: Option<ImpactEvent>,
}

impl Verdict {
    pub fn is_finding(&self) -> bool {
        self.primary.is_some()
    }
}

/// Keeps the first event of each allowed class; the primary event is the
/// most severe class (AC > AW > OC > RW), earliest first.
pub fn final_verdict(events: &[ImpactEvent], allowed: &BTreeSet<ImpactClass>) -> Verdict {
    let mut firsts: Vec<ImpactEvent> = Vec::new();
    for e in events.iter().filter(|e| allowed.contains(&e.class)) {
        if !firsts.iter().any(|f| f.class == e.class) {
            firsts.push(*e);
        }
    }
    let primary = firsts
        .iter()
        .copied()
        .max_by(|a, b| a.class.severity().cmp(&b.class.severity()).then(b.action_index.cmp(&a.action_index)));
    Verdict { events: firsts, primary }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shadow() -> ShadowState {
        let c = Region { base: 0x10000, len: 64 };
        let b = Region { base: 0x20000, len: 32 };
        ShadowState::new(c, &[0; 64], b, &[0; 32])
    }

    fn ev(class: ImpactClass, at: usize) -> ImpactEvent {
        ImpactEvent { class, site: None, action_index: at, action: ActionKind::HeapWrite, bug: None }
    }

    #[test]
    fn allocation_examples() {
        let mut s = shadow();
        s.record_chunk(0x1000, 0x20);
        assert_eq!(s.check_allocation(0x1010, 32), Some((ImpactClass::OverlappingChunk, None)));
        assert_eq!(s.check_allocation(0x10000, 16), Some((ImpactClass::ArbitraryChunk, Some(Site::Container))));
        assert_eq!(s.check_allocation(0x1ffff, 2), Some((ImpactClass::ArbitraryChunk, Some(Site::Buffer))));
        assert_eq!(s.check_allocation(0x3000, 32), None);
        assert_eq!(s.check_allocation(0x1020, 32), None);
        s.set_live(0, false);
        assert_eq!(s.check_allocation(0x1010, 32), None);
    }

    #[test]
    fn arbitrary_chunk_beats_overlap() {
        let mut s = shadow();
        s.record_chunk(0x10000 - 16, 32);
        assert_eq!(s.check_allocation(0x10000 - 8, 16).unwrap().0, ImpactClass::ArbitraryChunk);
    }

    #[test]
    fn divergence_resyncs() {
        let mut s = shadow();
        let mut c = [0u8; 64];
        c[8] = 1;
        assert_eq!(s.check_divergence(&c, &[0; 32]), vec![Site::Container]);
        assert!(s.check_divergence(&c, &[0; 32]).is_empty());
        s.sync(Site::Buffer, 4, &[9, 9]);
        let mut b = [0u8; 32];
        b[4] = 9;
        b[5] = 9;
        assert!(s.check_divergence(&c, &b).is_empty());
    }

    #[test]
    fn classes_follow_the_trigger() {
        use ImpactClass::*;
        assert_eq!(divergence_class(ActionKind::Deallocate, None), RestrictedWrite);
        assert_eq!(divergence_class(ActionKind::Allocate, None), RestrictedWrite);
        assert_eq!(divergence_class(ActionKind::HeapWrite, None), ArbitraryWrite);
        assert_eq!(divergence_class(ActionKind::BugInvoke, Some(BugKind::DoubleFree)), RestrictedWrite);
        assert_eq!(divergence_class(ActionKind::BugInvoke, Some(BugKind::ArbitraryFree)), RestrictedWrite);
        assert_eq!(divergence_class(ActionKind::BugInvoke, Some(BugKind::Overflow)), ArbitraryWrite);
    }

    #[test]
    fn verdict_examples() {
        let all: BTreeSet<_> = ImpactClass::ALL.into_iter().collect();
        assert_eq!(final_verdict(&[], &all), Verdict::default());
        let events = [
            ev(ImpactClass::RestrictedWrite, 3),
            ev(ImpactClass::ArbitraryWrite, 5),
            ev(ImpactClass::ArbitraryWrite, 7),
        ];
        let v = final_verdict(&events, &all);
        assert_eq!(v.events.len(), 2);
        assert_eq!(v.primary, Some(events[1]));
        let oc_only: BTreeSet<_> = [ImpactClass::OverlappingChunk].into_iter().collect();
        assert!(!final_verdict(&events[..1], &oc_only).is_finding());
    }
}
