//! Detectors for OS translation-management mistakes, built on an ideal TLB
//! that remembers every translation any hart could still be caching.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::hierarchy::AsidSpace;
use crate::memory::PteMutation;
use crate::tlb::{ExactTags, FlushFilter, IdealTlb, LookupKey, TlbEntry};
use crate::types::{AccessType, PageTableEntry, PteFlags};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ViolationKind {
    AsidReuseWithoutFlush,
    StalePteUpdate,
    DuplicateAsidForPageTable,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub hart: u16,
    pub asid: u16,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub other_asid: Option<u16>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root_ppn: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub previous_root_ppn: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vpn: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub old_pte: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub new_pte: Option<u64>,
    pub seq: u64,
}

impl Violation {
    fn new(kind: ViolationKind, hart: u16, asid: u16) -> Self {
        Violation {
            kind,
            hart,
            asid,
            other_asid: None,
            root_ppn: None,
            previous_root_ppn: None,
            vpn: None,
            old_pte: None,
            new_pte: None,
            seq: 0,
        }
    }
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "#{} {:?} hart={} asid={}", self.seq, self.kind, self.hart, self.asid)?;
        if let Some(a) = self.other_asid {
            write!(f, " other_asid={a}")?;
        }
        if let Some(r) = self.previous_root_ppn {
            write!(f, " previous_root={r:#x}")?;
        }
        if let Some(r) = self.root_ppn {
            write!(f, " root={r:#x}")?;
        }
        if let Some(v) = self.vpn {
            write!(f, " vpn={v:#x}")?;
        }
        if let (Some(o), Some(n)) = (self.old_pte, self.new_pte) {
            write!(f, " pte {o:#x} -> {n:#x}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Binding {
    root: u64,
    /// No full or ASID-wide fence has retired the binding yet.
    live: bool,
}

#[derive(Debug, Clone, Copy)]
struct Taint {
    old: u64,
    new: u64,
    reported: bool,
}

type EntryId = (u32, u64, u32, bool, Option<u16>, u64, u16);

fn id(e: &TlbEntry) -> EntryId {
    let asid = if e.global { 0 } else { e.asid };
    (e.level, e.vpn, asid, e.global, e.hart_tag, e.masi_tag, e.vmid)
}

/// Whether moving a cached leaf from `old` to `new` requires a fence before reuse.
pub fn needs_fence(old: PageTableEntry, new: PageTableEntry) -> bool {
    if !new.is_usable() {
        return true;
    }
    if new.ppn() != old.ppn() {
        return true;
    }
    let kept = PteFlags::RWX | PteFlags::U;
    !(new.flags() & kept).contains(old.flags() & kept)
}

/// Consumes the ordered event stream of one system. Entries and ASIDs are
/// held in domain form: hart-local spaces carry the hart tag, the global
/// space uses remapped ASID tags.
#[derive(Debug, Default)]
pub struct Validator {
    ideal: IdealTlb,
    taints: HashMap<EntryId, Taint>,
    bindings: HashMap<(AsidSpace, u32), Binding>,
    duplicates_seen: HashSet<(AsidSpace, u32, u32, u64)>,
    violations: Vec<Violation>,
    seq: u64,
}

impl Validator {
    pub fn violations(&self) -> &[Violation] {
        &self.violations
    }

    pub fn ideal(&self) -> &IdealTlb {
        &self.ideal
    }

    fn emit(&mut self, mut v: Violation) {
        v.seq = self.seq;
        self.seq += 1;
        log::debug!("violation: {v}");
        self.violations.push(v);
    }

    pub fn on_satp_write(&mut self, hart: u16, space: AsidSpace, asid: u32, raw_asid: u16, root: u64) {
        let prev = self.bindings.insert((space, asid), Binding { root, live: true });
        if raw_asid == 0 {
            return;
        }
        if let Some(b) = prev {
            if b.live && b.root != root {
                let mut v = Violation::new(ViolationKind::AsidReuseWithoutFlush, hart, raw_asid);
                v.root_ppn = Some(root);
                v.previous_root_ppn = Some(b.root);
                self.emit(v);
            }
        }
        let clashes: Vec<u32> = self
            .bindings
            .iter()
            .filter(|((s, a), b)| {
                *s == space && *a != asid && crate::tlb::raw_asid(*a) != 0 && b.live && b.root == root
            })
            .map(|((_, a), _)| *a)
            .collect();
        for other in clashes {
            let pair = (space, asid.min(other), asid.max(other), root);
            if self.duplicates_seen.insert(pair) {
                let mut v = Violation::new(ViolationKind::DuplicateAsidForPageTable, hart, raw_asid);
                v.other_asid = Some(crate::tlb::raw_asid(other));
                v.root_ppn = Some(root);
                self.emit(v);
            }
        }
    }

    pub fn on_fill(&mut self, entry: TlbEntry) {
        self.taints.remove(&id(&entry));
        self.ideal.insert(entry);
    }

    pub fn on_pte_mutation(&mut self, event: &PteMutation) {
        let new = PageTableEntry::from_raw(event.new);
        let hit: Vec<(EntryId, u64)> = self
            .ideal
            .iter()
            .filter(|e| !e.negative && e.pte_addr == event.paddr && needs_fence(e.pte, new))
            .map(|e| (id(e), e.pte.raw()))
            .collect();
        for (key, old) in hit {
            self.taints.entry(key).or_insert(Taint { old, new: event.new, reported: false }).new = event.new;
        }
    }

    pub fn on_access(&mut self, hart: u16, space: AsidSpace, asid: u32, vmid: u16, vpn: u64, access: AccessType) {
        let key = LookupKey { vpn, asid, hart_tag: space.hart, masi_tag: space.masi, vmid, access };
        let Some(entry) = self.ideal.lookup(&key, &ExactTags) else { return };
        let entry_id = id(entry);
        let Some(taint) = self.taints.get_mut(&entry_id) else { return };
        if taint.reported {
            return;
        }
        taint.reported = true;
        let mut v = Violation::new(ViolationKind::StalePteUpdate, hart, crate::tlb::raw_asid(asid));
        v.vpn = Some(vpn);
        v.old_pte = Some(taint.old);
        v.new_pte = Some(taint.new);
        self.emit(v);
    }

    pub fn on_fence(&mut self, space: AsidSpace, vpn: Option<u64>, asid: Option<u32>) {
        let filter = FlushFilter { vpn, asid, hart_tag: space.hart, masi_tag: Some(space.masi) };
        for e in self.ideal.drain_matching(&filter) {
            self.taints.remove(&id(&e));
        }
        if vpn.is_none() {
            for ((s, a), b) in self.bindings.iter_mut() {
                if *s == space && asid.is_none_or(|x| x == *a) {
                    b.live = false;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: AsidSpace = AsidSpace { hart: Some(0), masi: 0 };

    fn kinds(v: &Validator) -> Vec<ViolationKind> {
        v.violations().iter().map(|x| x.kind).collect()
    }

    #[test]
    fn reuse_after_fence_is_fine() {
        let mut v = Validator::default();
        v.on_satp_write(0, S, 1, 1, 0xA);
        v.on_fence(S, None, Some(1));
        v.on_satp_write(0, S, 1, 1, 0xB);
        assert!(v.violations().is_empty());
    }

    #[test]
    fn reuse_without_fence() {
        let mut v = Validator::default();
        v.on_satp_write(0, S, 1, 1, 0xA);
        v.on_satp_write(0, S, 1, 1, 0xB);
        assert_eq!(kinds(&v), [ViolationKind::AsidReuseWithoutFlush]);
    }

    #[test]
    fn asid_zero_is_exempt() {
        let mut v = Validator::default();
        v.on_satp_write(0, S, 0, 0, 0xA);
        v.on_satp_write(0, S, 0, 0, 0xB);
        assert!(v.violations().is_empty());
    }

    #[test]
    fn duplicate_asids_for_one_root() {
        let mut v = Validator::default();
        v.on_satp_write(0, S, 1, 1, 0xA);
        v.on_satp_write(0, S, 2, 2, 0xA);
        v.on_satp_write(0, S, 1, 1, 0xA);
        assert_eq!(kinds(&v), [ViolationKind::DuplicateAsidForPageTable]);
    }

    fn leaf(flags: PteFlags, ppn: u64) -> PageTableEntry {
        PageTableEntry::new(flags | PteFlags::V | PteFlags::A, ppn)
    }

    fn cached(pte: PageTableEntry) -> TlbEntry {
        TlbEntry {
            vpn: 0x10,
            level: 0,
            pte,
            asid: 1,
            global: false,
            hart_tag: Some(0),
            masi_tag: 0,
            vmid: 0,
            negative: false,
            origin_hart: 0,
            pte_addr: 0x5000,
        }
    }

    #[test]
    fn stale_ppn_change_then_access() {
        let mut v = Validator::default();
        let old = leaf(PteFlags::R | PteFlags::W, 0x100);
        v.on_fill(cached(old));
        v.on_pte_mutation(&PteMutation {
            paddr: 0x5000,
            old: old.raw(),
            new: leaf(PteFlags::R | PteFlags::W, 0x200).raw(),
        });
        v.on_access(0, S, 1, 0, 0x10, AccessType::Load);
        v.on_access(0, S, 1, 0, 0x10, AccessType::Load);
        assert_eq!(kinds(&v), [ViolationKind::StalePteUpdate]);
    }

    #[test]
    fn fence_clears_taint() {
        let mut v = Validator::default();
        let old = leaf(PteFlags::R | PteFlags::W, 0x100);
        v.on_fill(cached(old));
        v.on_pte_mutation(&PteMutation { paddr: 0x5000, old: old.raw(), new: leaf(PteFlags::R, 0x100).raw() });
        v.on_fence(S, Some(0x10), None);
        v.on_access(0, S, 1, 0, 0x10, AccessType::Load);
        assert!(v.violations().is_empty());
    }

    #[test]
    fn uncached_and_benign_mutations() {
        let mut v = Validator::default();
        let old = leaf(PteFlags::R, 0x100);
        v.on_fill(cached(old));
        v.on_pte_mutation(&PteMutation { paddr: 0x9000, old: 0, new: 0 });
        v.on_pte_mutation(&PteMutation {
            paddr: 0x5000,
            old: old.raw(),
            new: leaf(PteFlags::R | PteFlags::W | PteFlags::D, 0x100).raw(),
        });
        v.on_access(0, S, 1, 0, 0x10, AccessType::Load);
        assert!(v.violations().is_empty());
    }

    #[test]
    fn needs_fence_rules() {
        let rw = leaf(PteFlags::R | PteFlags::W, 1);
        assert!(needs_fence(rw, leaf(PteFlags::R, 1)));
        assert!(needs_fence(rw, leaf(PteFlags::R | PteFlags::W, 2)));
        assert!(needs_fence(rw, PageTableEntry::default()));
        assert!(!needs_fence(rw, PageTableEntry::new(PteFlags::V | PteFlags::R | PteFlags::W, 1)));
        assert!(!needs_fence(leaf(PteFlags::R, 1), rw));
    }
}
