//! SFENCE.VMA execution and flush categorization.

use dashmap::DashMap;
use serde::{Deserialize, Serialize};

use crate::hierarchy::{AsidSpace, System, Topology, TranslateError};
use crate::memory::PteMutation;
use crate::stats::Level;
use crate::tlb::FlushFilter;
use crate::trace::TraceRecord;
use crate::types::{vpn_of, PageTableEntry, PteFlags};
use crate::walk::{FaultKind, WalkResult};

/// An executed SFENCE.VMA.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FenceOp {
    pub hart: u16,
    pub vaddr: Option<u64>,
    pub asid: Option<u16>,
}

impl FenceOp {
    pub fn full(hart: u16) -> Self {
        FenceOp { hart, vaddr: None, asid: None }
    }

    pub fn vaddr(hart: u16, vaddr: u64) -> Self {
        FenceOp { hart, vaddr: Some(vaddr), asid: None }
    }

    pub fn asid(hart: u16, asid: u16) -> Self {
        FenceOp { hart, vaddr: None, asid: Some(asid) }
    }

    pub fn vaddr_asid(hart: u16, vaddr: u64, asid: u16) -> Self {
        FenceOp { hart, vaddr: Some(vaddr), asid: Some(asid) }
    }

    pub fn shape(&self) -> FenceShape {
        match (self.vaddr, self.asid) {
            (None, None) => FenceShape::Full,
            (Some(_), None) => FenceShape::Vaddr,
            (None, Some(_)) => FenceShape::Asid,
            (Some(_), Some(_)) => FenceShape::VaddrAsid,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FenceShape {
    Full,
    Vaddr,
    Asid,
    VaddrAsid,
}

impl FenceShape {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_targeted(self) -> bool {
        matches!(self, FenceShape::Vaddr | FenceShape::VaddrAsid)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlushCategory {
    NeverAccessed,
    PreviouslyInvalid,
    PreviouslyNonWritable,
    Necessary,
}

impl FlushCategory {
    pub const ALL: [FlushCategory; 4] = [
        FlushCategory::NeverAccessed,
        FlushCategory::PreviouslyInvalid,
        FlushCategory::PreviouslyNonWritable,
        FlushCategory::Necessary,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            FlushCategory::NeverAccessed => "never_accessed",
            FlushCategory::PreviouslyInvalid => "previously_invalid",
            FlushCategory::PreviouslyNonWritable => "previously_nonwritable",
            FlushCategory::Necessary => "necessary",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WalkOutcome {
    Invalid,
    Perms(PteFlags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HistoryRecord {
    pub asid: u32,
    pub outcome: WalkOutcome,
    pub pte_addr: u64,
    seq: u64,
}

/// Shadow record of the last walk per (ASID domain, VPN) plus the current
/// value of every PTE those walks touched.
#[derive(Debug, Default)]
pub struct PteHistory {
    records: DashMap<(AsidSpace, u64), Vec<HistoryRecord>>,
    current: DashMap<u64, u64>,
    seq: std::sync::atomic::AtomicU64,
}

impl PteHistory {
    pub fn record_walk(&self, space: AsidSpace, asid: u32, vpn: u64, result: &WalkResult) {
        let (outcome, pte, pte_addr) = match result {
            WalkResult::Success(t) => (WalkOutcome::Perms(t.pte.permissions()), t.pte, t.pte_addr),
            WalkResult::Fault(f) => match f.pte_addr {
                None => return,
                Some(addr) if f.kind == FaultKind::InvalidEntry => (WalkOutcome::Invalid, f.pte, addr),
                Some(addr) => (WalkOutcome::Perms(f.pte.permissions()), f.pte, addr),
            },
        };
        let seq = self.seq.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.current.entry(pte_addr).or_insert(pte.raw());
        let rec = HistoryRecord { asid, outcome, pte_addr, seq };
        let mut slot = self.records.entry((space, vpn)).or_default();
        match slot.iter_mut().find(|r| r.asid == asid) {
            Some(r) => *r = rec,
            None => slot.push(rec),
        }
    }

    pub fn on_mutation(&self, event: &PteMutation) {
        if let Some(mut v) = self.current.get_mut(&event.paddr) {
            *v = event.new;
        }
    }

    /// Last walk of `vpn` in `space`: for `asid` if given, else the most recent.
    pub fn last_walk(&self, space: AsidSpace, vpn: u64, asid: Option<u32>) -> Option<HistoryRecord> {
        let slot = self.records.get(&(space, vpn))?;
        match asid {
            Some(a) => slot.iter().find(|r| r.asid == a).copied(),
            None => slot.iter().max_by_key(|r| r.seq).copied(),
        }
    }

    pub fn current_pte(&self, pte_addr: u64) -> Option<PageTableEntry> {
        self.current.get(&pte_addr).map(|v| PageTableEntry::from_raw(*v))
    }

    pub fn categorize(&self, space: AsidSpace, vpn: u64, asid: Option<u32>) -> FlushCategory {
        let Some(rec) = self.last_walk(space, vpn, asid) else {
            return FlushCategory::NeverAccessed;
        };
        let current = self.current_pte(rec.pte_addr).unwrap_or_default();
        classify(rec.outcome, current)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Category of a targeted fence given the last walk and the current PTE.
pub fn classify(last: WalkOutcome, current: PageTableEntry) -> FlushCategory {
    match last {
        WalkOutcome::Invalid if current.is_valid() => FlushCategory::PreviouslyInvalid,
        WalkOutcome::Perms(p) if !p.contains(PteFlags::W) && current.permissions().contains(PteFlags::W) => {
            FlushCategory::PreviouslyNonWritable
        }
        _ => FlushCategory::Necessary,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FenceOutcome {
    pub l1i: usize,
    pub l1d: usize,
    pub l2: usize,
    pub category: Option<FlushCategory>,
}

impl System {
    pub fn sfence(&self, op: FenceOp) -> Result<FenceOutcome, TranslateError> {
        let ctx = self.hart_or_err(op.hart)?;
        let satp = ctx.satp();
        let space = self.hart_space(ctx);
        let domain_asid = op.asid.map(|a| self.domain_asid(op.hart, a));
        // Sv32 addresses are never non-canonical; other modes drop the sign bits.
        let vpn = op.vaddr.map(|va| match satp.mode() {
            crate::types::PagingMode::Bare => va >> crate::types::PAGE_SHIFT,
            mode => vpn_of(va, mode),
        });
        let shape = op.shape();
        let category = vpn.map(|v| self.monitor.history.categorize(space, v, domain_asid));

        let l1_filter = FlushFilter { vpn, asid: op.asid.map(u32::from), hart_tag: Some(op.hart), masi_tag: None };
        let (l1i, l1d) = self.flush_l1s(ctx, &l1_filter);

        let mut l2_count = 0;
        if let Some(l2) = self.l2_for_hart(ctx) {
            let filter = match self.config().topology {
                Topology::SharedL2GlobalAsid { .. } => {
                    FlushFilter { vpn, asid: domain_asid, hart_tag: None, masi_tag: Some(space.masi) }
                }
                _ => FlushFilter { hart_tag: self.l2_hart_tag(op.hart), ..l1_filter },
            };
            l2_count = l2.flush(&filter);
            ctx.counters
                .level(Level::L2)
                .flushed_entries
                .fetch_add(l2_count as u64, std::sync::atomic::Ordering::Relaxed);
        }

        if let Some(v) = &self.monitor.validator {
            v.lock().on_fence(space, vpn, domain_asid);
        }
        ctx.counters.add_fence(shape, category);
        self.monitor.record(TraceRecord::sfence(op));
        Ok(FenceOutcome { l1i, l1d, l2: l2_count, category })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::walk::{Translation, WalkFault};

    const SPACE: AsidSpace = AsidSpace { hart: Some(0), masi: 0 };

    fn pte(flags: PteFlags) -> PageTableEntry {
        PageTableEntry::new(flags | PteFlags::V, 0x100)
    }

    fn success(flags: PteFlags, addr: u64) -> WalkResult {
        WalkResult::Success(Translation { pte: pte(flags), level: 0, paddr: 0x100000, pte_addr: addr })
    }

    #[test]
    fn empty_history_is_never_accessed() {
        let h = PteHistory::default();
        assert_eq!(h.categorize(SPACE, 5, None), FlushCategory::NeverAccessed);
    }

    #[test]
    fn read_only_upgraded_to_writable() {
        let h = PteHistory::default();
        h.record_walk(SPACE, 1, 5, &success(PteFlags::R | PteFlags::A, 0x8000));
        h.on_mutation(&PteMutation { paddr: 0x8000, old: 0, new: pte(PteFlags::R | PteFlags::W).raw() });
        assert_eq!(h.categorize(SPACE, 5, Some(1)), FlushCategory::PreviouslyNonWritable);
    }

    #[test]
    fn downgrade_is_necessary() {
        let h = PteHistory::default();
        h.record_walk(SPACE, 1, 5, &success(PteFlags::R | PteFlags::W, 0x8000));
        h.on_mutation(&PteMutation { paddr: 0x8000, old: 0, new: pte(PteFlags::R).raw() });
        assert_eq!(h.categorize(SPACE, 5, None), FlushCategory::Necessary);
    }

    #[test]
    fn invalid_then_valid() {
        let h = PteHistory::default();
        let fault = WalkResult::Fault(WalkFault {
            kind: FaultKind::InvalidEntry,
            level: 0,
            pte: PageTableEntry::default(),
            pte_addr: Some(0x9000),
        });
        h.record_walk(SPACE, 0, 7, &fault);
        assert_eq!(h.categorize(SPACE, 7, None), FlushCategory::Necessary);
        h.on_mutation(&PteMutation { paddr: 0x9000, old: 0, new: pte(PteFlags::R).raw() });
        assert_eq!(h.categorize(SPACE, 7, None), FlushCategory::PreviouslyInvalid);
    }

    #[test]
    fn asid_selects_record() {
        let h = PteHistory::default();
        h.record_walk(SPACE, 1, 5, &success(PteFlags::R, 0x8000));
        assert_eq!(h.categorize(SPACE, 5, Some(2)), FlushCategory::NeverAccessed);
        let other = AsidSpace { hart: Some(1), masi: 0 };
        assert_eq!(h.categorize(other, 5, Some(1)), FlushCategory::NeverAccessed);
    }

    #[test]
    fn shapes() {
        assert_eq!(FenceOp::full(0).shape(), FenceShape::Full);
        assert_eq!(FenceOp::vaddr(0, 1).shape(), FenceShape::Vaddr);
        assert_eq!(FenceOp::asid(0, 1).shape(), FenceShape::Asid);
        assert_eq!(FenceOp::vaddr_asid(0, 1, 1).shape(), FenceShape::VaddrAsid);
        assert!(FenceShape::VaddrAsid.is_targeted());
        assert!(!FenceShape::Asid.is_targeted());
    }
}
