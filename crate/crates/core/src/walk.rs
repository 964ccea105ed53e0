//! Multi-level page-table walker over [`SparseMemory`].

use serde::{Deserialize, Serialize};

use crate::memory::{MemoryError, PteMutation, SparseMemory};
use crate::types::{split_vaddr, AccessType, PageTableEntry, PagingMode, PteFlags, Satp, PAGE_SHIFT, PAGE_SIZE};

/// Walker knobs. Independent of each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    /// Hardware sets A (and D on stores) during the walk. When clear, a leaf
    /// lacking the needed bit faults with [`FaultKind::AdRequired`].
    pub update_ad: bool,
    /// Invalid translations are cached as negative TLB entries.
    pub cache_invalid: bool,
    /// A store hitting a cached entry without W faults without re-walking.
    pub cache_nonwritable: bool,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig { update_ad: true, cache_invalid: false, cache_nonwritable: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    InvalidEntry,
    PermissionDenied,
    MisalignedSuperpage,
    AdRequired,
    NonCanonical,
}

impl FaultKind {
    pub const ALL: [FaultKind; 5] = [
        FaultKind::InvalidEntry,
        FaultKind::PermissionDenied,
        FaultKind::MisalignedSuperpage,
        FaultKind::AdRequired,
        FaultKind::NonCanonical,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FaultKind::InvalidEntry => "invalid_entry",
            FaultKind::PermissionDenied => "permission_denied",
            FaultKind::MisalignedSuperpage => "misaligned_superpage",
            FaultKind::AdRequired => "ad_required",
            FaultKind::NonCanonical => "non_canonical",
        }
    }
}

/// A successful translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translation {
    pub pte: PageTableEntry,
    /// 0 for a 4 KiB page.
    pub level: u32,
    pub paddr: u64,
    /// Where the leaf PTE lives.
    pub pte_addr: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WalkFault {
    pub kind: FaultKind,
    /// Level at which the walk stopped.
    pub level: u32,
    /// The PTE that caused the fault (zero for non-canonical addresses).
    pub pte: PageTableEntry,
    /// Address of that PTE, if the walk reached memory.
    pub pte_addr: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkResult {
    Success(Translation),
    Fault(WalkFault),
}

impl WalkResult {
    pub fn is_success(&self) -> bool {
        matches!(self, WalkResult::Success(_))
    }

    pub fn fault_kind(&self) -> Option<FaultKind> {
        match self {
            WalkResult::Fault(f) => Some(f.kind),
            WalkResult::Success(_) => None,
        }
    }
}

fn read_pte(mem: &SparseMemory, mode: PagingMode, addr: u64) -> PageTableEntry {
    // Walk addresses are always PTE-aligned by construction.
    let raw = match mode {
        PagingMode::Sv32 => mem.read_u32(addr).map(u64::from),
        _ => mem.read_u64(addr),
    };
    PageTableEntry::from_raw(raw.unwrap_or(0))
}

fn set_pte_bits(mem: &SparseMemory, mode: PagingMode, addr: u64, bits: PteFlags) -> PageTableEntry {
    let raw = match mode {
        PagingMode::Sv32 => mem.fetch_or_u32(addr, bits.bits() as u32).map(u64::from),
        _ => mem.fetch_or_u64(addr, bits.bits()),
    };
    PageTableEntry::from_raw(raw.unwrap_or(0))
}

/// Applies the leaf-level checks (permission, superpage alignment, A/D) to an
/// already located leaf and forms the physical address.
///
/// `mem` receives A/D updates when `cfg.update_ad` is set; with `None` the
/// bits are set on the returned PTE only. Used by the walker and by trace
/// replay, which supplies recorded leaves instead of walking.
#[allow(clippy::too_many_arguments)]
pub fn resolve_leaf(
    pte: PageTableEntry,
    level: u32,
    pte_addr: u64,
    vaddr: u64,
    access: AccessType,
    cfg: &WalkConfig,
    mode: PagingMode,
    mem: Option<&SparseMemory>,
) -> WalkResult {
    let fault = |kind| WalkResult::Fault(WalkFault { kind, level, pte, pte_addr: Some(pte_addr) });
    if !pte.is_usable() || !pte.is_leaf() {
        return fault(FaultKind::InvalidEntry);
    }
    if !pte.permits(access) {
        return fault(FaultKind::PermissionDenied);
    }
    let low_mask = (1u64 << (mode.index_bits() * level)) - 1;
    if pte.ppn() & low_mask != 0 {
        return fault(FaultKind::MisalignedSuperpage);
    }
    let mut needed = PteFlags::A;
    if access == AccessType::Store {
        needed |= PteFlags::D;
    }
    let mut pte = pte;
    if !pte.flags().contains(needed) {
        if !cfg.update_ad {
            return fault(FaultKind::AdRequired);
        }
        pte = match mem {
            Some(mem) => set_pte_bits(mem, mode, pte_addr, needed),
            None => pte.with_flags(needed),
        };
    }
    let vpn = (vaddr >> PAGE_SHIFT) & ((1u64 << (mode.va_bits() - PAGE_SHIFT)) - 1);
    let ppn = (pte.ppn() & !low_mask) | (vpn & low_mask);
    WalkResult::Success(Translation { pte, level, paddr: (ppn << PAGE_SHIFT) | (vaddr & (PAGE_SIZE - 1)), pte_addr })
}

/// Walks the tables rooted at `satp` for `vaddr`.
///
/// # Panics
///
/// If `satp` is in `Bare` mode; callers handle identity translation.
pub fn walk(mem: &SparseMemory, satp: Satp, vaddr: u64, access: AccessType, cfg: &WalkConfig) -> WalkResult {
    let mode = satp.mode();
    assert!(mode != PagingMode::Bare, "bare mode never walks");
    let parts = match split_vaddr(vaddr, mode) {
        Ok(parts) => parts,
        Err(_) => {
            return WalkResult::Fault(WalkFault {
                kind: FaultKind::NonCanonical,
                level: mode.levels() - 1,
                pte: PageTableEntry::default(),
                pte_addr: None,
            })
        }
    };
    let mut table = satp.root_addr();
    let mut level = mode.levels() - 1;
    loop {
        let pte_addr = table + parts.index_at(level) * mode.pte_size();
        let pte = read_pte(mem, mode, pte_addr);
        if !pte.is_usable() {
            return WalkResult::Fault(WalkFault {
                kind: FaultKind::InvalidEntry,
                level,
                pte,
                pte_addr: Some(pte_addr),
            });
        }
        if pte.is_leaf() {
            return resolve_leaf(pte, level, pte_addr, vaddr, access, cfg, mode, Some(mem));
        }
        if level == 0 {
            return WalkResult::Fault(WalkFault {
                kind: FaultKind::InvalidEntry,
                level,
                pte,
                pte_addr: Some(pte_addr),
            });
        }
        table = pte.ppn() << PAGE_SHIFT;
        level -= 1;
    }
}

/// Replaces a 64-bit PTE word and reports the mutation to observers.
pub fn write_pte(mem: &SparseMemory, paddr: u64, raw: u64) -> Result<u64, MemoryError> {
    let old = mem.write_u64(paddr, raw)?;
    mem.notify(&PteMutation { paddr, old, new: raw });
    Ok(old)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::MutationObserver;
    use parking_lot::Mutex;
    use std::sync::Arc;

    const ROOT: u64 = 0x100;

    fn rwx() -> PteFlags {
        PteFlags::V | PteFlags::RWX
    }

    fn sv39() -> Satp {
        Satp::new(PagingMode::Sv39, 1, ROOT)
    }

    /// Hand-built three-level mapping of 0x8020_1000 -> ppn 0x1234.
    fn build_table(mem: &SparseMemory, leaf: PageTableEntry) {
        let l1 = 0x101u64;
        let l0 = 0x102u64;
        mem.write_u64((ROOT << 12) + 2 * 8, PageTableEntry::new(PteFlags::V, l1).raw()).unwrap();
        mem.write_u64((l1 << 12) + 8, PageTableEntry::new(PteFlags::V, l0).raw()).unwrap();
        mem.write_u64((l0 << 12) + 8, leaf.raw()).unwrap();
    }

    #[test]
    fn empty_memory_faults_invalid() {
        let mem = SparseMemory::new();
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &WalkConfig::default());
        assert_eq!(r.fault_kind(), Some(FaultKind::InvalidEntry));
    }

    #[test]
    fn three_level_walk_succeeds() {
        let mem = SparseMemory::new();
        build_table(&mem, PageTableEntry::new(rwx(), 0x1234));
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &WalkConfig::default());
        match r {
            WalkResult::Success(t) => {
                assert_eq!(t.level, 0);
                assert_eq!(t.paddr, 0x1234000);
                assert_eq!(t.pte_addr, (0x102 << 12) + 8);
                assert!(t.pte.flags().contains(PteFlags::A));
                assert!(!t.pte.flags().contains(PteFlags::D));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn store_to_read_only_leaf_denied() {
        let mem = SparseMemory::new();
        build_table(&mem, PageTableEntry::new(PteFlags::V | PteFlags::R, 0x1234));
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Store, &WalkConfig::default());
        assert_eq!(r.fault_kind(), Some(FaultKind::PermissionDenied));
    }

    #[test]
    fn misaligned_gigapage() {
        let mem = SparseMemory::new();
        // ppn low 18 bits nonzero.
        let leaf = PageTableEntry::new(rwx(), (1 << 18) | 0x200);
        mem.write_u64((ROOT << 12) + 2 * 8, leaf.raw()).unwrap();
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &WalkConfig::default());
        assert_eq!(r.fault_kind(), Some(FaultKind::MisalignedSuperpage));

        let aligned = PageTableEntry::new(rwx(), 1 << 18);
        mem.write_u64((ROOT << 12) + 2 * 8, aligned.raw()).unwrap();
        match walk(&mem, sv39(), 0x8020_1234, AccessType::Load, &WalkConfig::default()) {
            WalkResult::Success(t) => {
                assert_eq!(t.level, 2);
                // low 30 bits come from the vaddr.
                assert_eq!(t.paddr, (1 << 30) | 0x0020_1234);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ad_required_when_updates_disabled() {
        let mem = SparseMemory::new();
        build_table(&mem, PageTableEntry::new(rwx(), 0x1234));
        let cfg = WalkConfig { update_ad: false, ..Default::default() };
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &cfg);
        assert_eq!(r.fault_kind(), Some(FaultKind::AdRequired));
        // Memory untouched.
        assert_eq!(mem.read_u64((0x102 << 12) + 8).unwrap(), PageTableEntry::new(rwx(), 0x1234).raw());

        build_table(&mem, PageTableEntry::new(rwx() | PteFlags::A, 0x1234));
        assert!(walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &cfg).is_success());
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Store, &cfg);
        assert_eq!(r.fault_kind(), Some(FaultKind::AdRequired));
    }

    #[test]
    fn store_sets_dirty_and_never_clears() {
        let mem = SparseMemory::new();
        build_table(&mem, PageTableEntry::new(rwx(), 0x1234));
        let cfg = WalkConfig::default();
        walk(&mem, sv39(), 0x8020_1000, AccessType::Store, &cfg);
        let raw = mem.read_u64((0x102 << 12) + 8).unwrap();
        assert!(PageTableEntry::from_raw(raw).flags().contains(PteFlags::A | PteFlags::D));
        walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &cfg);
        assert_eq!(mem.read_u64((0x102 << 12) + 8).unwrap(), raw);
    }

    #[test]
    fn non_leaf_at_level_zero_is_invalid() {
        let mem = SparseMemory::new();
        build_table(&mem, PageTableEntry::new(PteFlags::V, 0x1234));
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &WalkConfig::default());
        assert_eq!(r.fault_kind(), Some(FaultKind::InvalidEntry));
    }

    #[test]
    fn reserved_encoding_faults_invalid() {
        let mem = SparseMemory::new();
        build_table(&mem, PageTableEntry::new(PteFlags::V | PteFlags::W, 0x1234));
        let r = walk(&mem, sv39(), 0x8020_1000, AccessType::Load, &WalkConfig::default());
        assert_eq!(r.fault_kind(), Some(FaultKind::InvalidEntry));
    }

    #[test]
    fn non_canonical_faults() {
        let mem = SparseMemory::new();
        let r = walk(&mem, sv39(), 0xFFFF_0000_0000_0000, AccessType::Load, &WalkConfig::default());
        assert_eq!(r.fault_kind(), Some(FaultKind::NonCanonical));
    }

    #[test]
    fn sv32_two_level_walk() {
        let mem = SparseMemory::new();
        let satp = Satp::new(PagingMode::Sv32, 1, 0x10);
        // vaddr 0x0040_3123: vpn1 = 1, vpn0 = 3.
        mem.write_u32((0x10 << 12) + 4, PageTableEntry::new(PteFlags::V, 0x11).raw() as u32).unwrap();
        mem.write_u32((0x11 << 12) + 3 * 4, PageTableEntry::new(rwx(), 0x2_0000).raw() as u32).unwrap();
        match walk(&mem, satp, 0x0040_3123, AccessType::Fetch, &WalkConfig::default()) {
            WalkResult::Success(t) => assert_eq!(t.paddr, 0x2000_0123),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[derive(Default)]
    struct Recorder(Mutex<Vec<PteMutation>>);

    impl MutationObserver for Recorder {
        fn on_mutation(&self, event: &PteMutation) {
            self.0.lock().push(*event);
        }
    }

    #[test]
    fn write_pte_emits_events() {
        let mem = SparseMemory::new();
        let rec = Arc::new(Recorder::default());
        mem.add_observer(rec.clone());

        assert_eq!(write_pte(&mem, 0x1000, 0).unwrap(), 0);
        let leaf = PageTableEntry::new(PteFlags::V | PteFlags::R | PteFlags::W, 5).raw();
        assert_eq!(write_pte(&mem, 0x1008, leaf).unwrap(), 0);
        let ro = PageTableEntry::new(PteFlags::V | PteFlags::R, 5).raw();
        assert_eq!(write_pte(&mem, 0x1008, ro).unwrap(), leaf);
        assert!(write_pte(&mem, 0x1004, 0).is_err());

        let events = rec.0.lock().clone();
        assert_eq!(events.len(), 3);
        assert_eq!(events[0], PteMutation { paddr: 0x1000, old: 0, new: 0 });
        assert!(!PageTableEntry::from_raw(events[1].old).is_valid());
        assert!(PageTableEntry::from_raw(events[1].new).is_valid());
        // Permission-reduction: old perms not a subset of new.
        let old = PageTableEntry::from_raw(events[2].old).permissions();
        let new = PageTableEntry::from_raw(events[2].new).permissions();
        assert!(!new.contains(old));
    }
}
