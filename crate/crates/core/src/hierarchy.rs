//! The translation pipeline: per-hart L1 I/D TLBs, an optional L2 layer and
//! the page walker.
//!
//! The ISA simulator keeps its own fast-path TLB (the "L0") and only calls
//! [`System::translate`] when that misses. To keep every miss visible, each
//! L0 entry must also live in the simulated L1: whenever an L1 entry is
//! evicted or flushed, the registered L0 invalidation callbacks fire before
//! the operation returns. L2 is neither inclusive nor exclusive of L1.

use std::io::Write;
use std::sync::atomic::{AtomicBool, AtomicU16, AtomicU64, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::Event;
use crate::fence::PteHistory;
use crate::memory::{MemoryError, MutationObserver, PteMutation, SparseMemory};
use crate::sharing::{GlobalAsidMatcher, ImplDefinedPolicy, MasiCsr, MasiError};
use crate::stats::{HartCounters, Level, StatsSnapshot};
use crate::tlb::{
    level_base, ExactTags, GeometryError, InsertOutcome, LookupKey, TagMatcher, Tlb, TlbEntry, TlbGeometry, LEVEL_BITS,
    SYNTHETIC_ASID_BASE,
};
use crate::trace::{TraceRecord, TraceWriter};
use crate::types::{is_canonical, vpn_of, AccessType, PageTableEntry, PagingMode, Satp, PAGE_SHIFT, PAGE_SIZE};
use crate::validate::{Validator, Violation};
use crate::walk::{resolve_leaf, walk, FaultKind, WalkConfig, WalkResult};

/// L2 organisation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Topology {
    L1Only,
    /// One L2 per hart, shared by that hart's I- and D-TLB.
    PrivateL2 {
        l2: TlbGeometry,
    },
    /// One L2 for all harts. With `hart_tagged`, every entry carries its
    /// hart ID and only serves that hart. Without it, entries are matched on
    /// ASID alone and ASID 0 is shared naively across harts.
    SharedL2 {
        l2: TlbGeometry,
        hart_tagged: bool,
    },
    /// One L2 for all harts in a global ASID space. Entries carry no hart
    /// tag; ASID 0 is replaced by a hart-unique tag; cross-hart hits follow
    /// the sharing table.
    SharedL2GlobalAsid {
        l2: TlbGeometry,
    },
}

impl Topology {
    pub const NAMES: [&'static str; 4] = ["l1_only", "private", "shared", "shared_global_asid"];

    pub fn name(&self) -> &'static str {
        match self {
            Topology::L1Only => "l1_only",
            Topology::PrivateL2 { .. } => "private",
            Topology::SharedL2 { hart_tagged: true, .. } => "shared",
            Topology::SharedL2 { hart_tagged: false, .. } => "shared_untagged",
            Topology::SharedL2GlobalAsid { .. } => "shared_global_asid",
        }
    }

    /// Builds a topology with `per_core` L2 entries per hart, 8-way.
    pub fn from_name(name: &str, per_core: usize, harts: usize) -> Option<Self> {
        let ways = 8.min(per_core.max(1));
        let private = TlbGeometry::set_associative(per_core, ways);
        let shared = TlbGeometry::set_associative(per_core * harts, ways);
        Some(match name {
            "l1_only" => Topology::L1Only,
            "private" => Topology::PrivateL2 { l2: private },
            "shared" => Topology::SharedL2 { l2: shared, hart_tagged: true },
            "shared_untagged" => Topology::SharedL2 { l2: shared, hart_tagged: false },
            "shared_global_asid" => Topology::SharedL2GlobalAsid { l2: shared },
            _ => return None,
        })
    }

    pub fn l2_geometry(&self) -> Option<&TlbGeometry> {
        match self {
            Topology::L1Only => None,
            Topology::PrivateL2 { l2 } | Topology::SharedL2 { l2, .. } | Topology::SharedL2GlobalAsid { l2 } => {
                Some(l2)
            }
        }
    }

    /// L2 entries available per hart.
    pub fn l2_per_core(&self, harts: usize) -> usize {
        match self {
            Topology::L1Only => 0,
            Topology::PrivateL2 { l2 } => l2.entries,
            Topology::SharedL2 { l2, .. } | Topology::SharedL2GlobalAsid { l2 } => l2.entries / harts.max(1),
        }
    }

    fn is_global_asid(&self) -> bool {
        matches!(self, Topology::SharedL2GlobalAsid { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MasiHardwired {
    Value(u64),
    /// The hart ID, placed just above the writable bits.
    HartId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MasiConfig {
    pub writable_mask: u64,
    pub hardwired: MasiHardwired,
}

impl Default for MasiConfig {
    fn default() -> Self {
        MasiConfig { writable_mask: 0, hardwired: MasiHardwired::Value(0) }
    }
}

impl MasiConfig {
    pub fn build(&self, hart: u16) -> Result<MasiCsr, MasiError> {
        let hardwired = match self.hardwired {
            MasiHardwired::Value(v) => v,
            MasiHardwired::HartId => (hart as u64).checked_shl(self.writable_mask.count_ones()).unwrap_or(0),
        };
        MasiCsr::new(self.writable_mask, hardwired)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub harts: usize,
    pub l1i: TlbGeometry,
    pub l1d: TlbGeometry,
    pub topology: Topology,
    pub walk: WalkConfig,
    pub impl_defined: ImplDefinedPolicy,
    pub masi: MasiConfig,
    /// Per-hart MASI settings; overrides `masi` when present.
    pub per_hart_masi: Option<Vec<MasiConfig>>,
    pub validators: bool,
}

impl Default for SystemConfig {
    fn default() -> Self {
        SystemConfig {
            harts: 8,
            l1i: TlbGeometry::fully_associative(32),
            l1d: TlbGeometry::fully_associative(32),
            topology: Topology::PrivateL2 { l2: TlbGeometry::set_associative(128, 8) },
            walk: WalkConfig::default(),
            impl_defined: ImplDefinedPolicy::NoShare,
            masi: MasiConfig::default(),
            per_hart_masi: None,
            validators: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("harts must be between 1 and 65535, got {0}")]
    Harts(usize),
    #[error("{field}: {source}")]
    Geometry { field: &'static str, source: GeometryError },
    #[error("masi: {0}")]
    Masi(#[from] MasiError),
    #[error("per_hart_masi has {got} entries for {harts} harts")]
    MasiCount { got: usize, harts: usize },
}

impl SystemConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.harts == 0 || self.harts > u16::MAX as usize {
            return Err(ConfigError::Harts(self.harts));
        }
        self.l1i.validate().map_err(|source| ConfigError::Geometry { field: "l1i", source })?;
        self.l1d.validate().map_err(|source| ConfigError::Geometry { field: "l1d", source })?;
        if let Some(l2) = self.topology.l2_geometry() {
            l2.validate().map_err(|source| ConfigError::Geometry { field: "topology.l2", source })?;
        }
        if let Some(per_hart) = &self.per_hart_masi {
            if per_hart.len() != self.harts {
                return Err(ConfigError::MasiCount { got: per_hart.len(), harts: self.harts });
            }
        }
        for hart in 0..self.harts as u16 {
            self.masi_for(hart).build(hart)?;
        }
        Ok(())
    }

    fn masi_for(&self, hart: u16) -> MasiConfig {
        match &self.per_hart_masi {
            Some(v) => v[hart as usize],
            None => self.masi,
        }
    }
}

/// Per-hart architectural state and private TLBs.
#[derive(Debug)]
pub struct HartContext {
    id: u16,
    satp: AtomicU64,
    masi: MasiCsr,
    vmid: AtomicU16,
    pub(crate) counters: HartCounters,
    pub(crate) l1i: Tlb,
    pub(crate) l1d: Tlb,
    pub(crate) private_l2: Option<Tlb>,
}

impl HartContext {
    pub fn id(&self) -> u16 {
        self.id
    }

    pub fn satp(&self) -> Satp {
        Satp::from_raw(self.satp.load(Ordering::Acquire)).unwrap_or_default()
    }

    pub fn masi(&self) -> &MasiCsr {
        &self.masi
    }

    pub fn vmid(&self) -> u16 {
        self.vmid.load(Ordering::Relaxed)
    }

    pub fn counters(&self) -> &HartCounters {
        &self.counters
    }

    pub fn l1(&self, access: AccessType) -> &Tlb {
        match access {
            AccessType::Fetch => &self.l1i,
            _ => &self.l1d,
        }
    }
}

/// Tag domain in which an ASID has meaning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct AsidSpace {
    /// Hart-local space, or `None` for the global space.
    pub hart: Option<u16>,
    pub masi: u64,
}

/// Notification that an L1 entry covering `vpn` at `level` is gone, so the
/// ISA simulator must drop any L0 entries in that range.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct L0Invalidation {
    pub hart: u16,
    pub vpn: u64,
    pub level: u32,
}

impl L0Invalidation {
    pub fn covers(&self, vpn: u64) -> bool {
        level_base(vpn, self.level) == self.vpn
    }
}

pub type L0Callback = Box<dyn Fn(L0Invalidation) + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Translated {
    pub paddr: u64,
    pub level: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum TranslateError {
    #[error("hart {0} is not registered")]
    UnknownHart(u16),
    #[error("translation fault: {}", .0.name())]
    Fault(FaultKind),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("hart {0} is not registered")]
    UnknownHart(u16),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

/// Where the walk stage gets its leaf from.
#[derive(Debug, Clone, Copy)]
pub(crate) enum LeafSource {
    Walk,
    /// A leaf recorded in a trace; replay never walks memory.
    Recorded {
        pte: PageTableEntry,
        level: u32,
        pte_addr: u64,
    },
}

enum CachedUse {
    Use,
    Fault(FaultKind),
    Rewalk,
}

enum L2Tags {
    Exact,
    Global(GlobalAsidMatcher),
}

impl TagMatcher for L2Tags {
    fn admits(&self, entry: &TlbEntry, key: &LookupKey) -> bool {
        match self {
            L2Tags::Exact => ExactTags.admits(entry, key),
            L2Tags::Global(m) => m.admits(entry, key),
        }
    }
}

/// Leaf reported in the trace for a memory operation.
#[derive(Default)]
struct LeafNote {
    pte: u64,
    level: u32,
    pte_addr: u64,
}

impl LeafNote {
    fn set(&mut self, pte: PageTableEntry, level: u32, pte_addr: u64) {
        *self = LeafNote { pte: pte.raw(), level, pte_addr };
    }
}

pub(crate) struct TraceCollector {
    writer: TraceWriter<Box<dyn Write + Send>>,
    error: Option<std::io::Error>,
}

/// State reachable from both the system and the memory observer hook.
pub(crate) struct Monitor {
    pub(crate) history: PteHistory,
    pub(crate) validator: Option<Mutex<Validator>>,
    collecting: AtomicBool,
    collector: Mutex<Option<TraceCollector>>,
}

impl Monitor {
    pub(crate) fn record(&self, rec: TraceRecord) {
        if !self.collecting.load(Ordering::Acquire) {
            return;
        }
        if let Some(c) = self.collector.lock().as_mut() {
            if c.error.is_none() {
                if let Err(e) = c.writer.write_record(&rec) {
                    c.error = Some(e);
                }
            }
        }
    }
}

impl MutationObserver for Monitor {
    fn on_mutation(&self, event: &PteMutation) {
        self.history.on_mutation(event);
        if let Some(v) = &self.validator {
            v.lock().on_pte_mutation(event);
        }
        self.record(TraceRecord::pte_write(event.paddr, event.old, event.new));
    }
}

/// A simulated multi-hart machine.
pub struct System {
    cfg: SystemConfig,
    mem: Arc<SparseMemory>,
    harts: Vec<HartContext>,
    shared_l2: Option<Tlb>,
    l2_tags: Option<L2Tags>,
    l0_callbacks: Vec<L0Callback>,
    pub(crate) monitor: Arc<Monitor>,
}

impl std::fmt::Debug for System {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("System").field("cfg", &self.cfg).field("harts", &self.harts.len()).finish()
    }
}

fn geometry_err(field: &'static str) -> impl Fn(GeometryError) -> ConfigError {
    move |source| ConfigError::Geometry { field, source }
}

impl System {
    pub fn new(cfg: SystemConfig, mem: Arc<SparseMemory>) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let harts = (0..cfg.harts as u16)
            .map(|id| {
                let private_l2 = match cfg.topology {
                    Topology::PrivateL2 { l2 } => Some(Tlb::new(l2).map_err(geometry_err("topology.l2"))?),
                    _ => None,
                };
                Ok(HartContext {
                    id,
                    satp: AtomicU64::new(Satp::bare().to_raw()),
                    masi: cfg.masi_for(id).build(id)?,
                    vmid: AtomicU16::new(0),
                    counters: HartCounters::default(),
                    l1i: Tlb::new(cfg.l1i).map_err(geometry_err("l1i"))?,
                    l1d: Tlb::new(cfg.l1d).map_err(geometry_err("l1d"))?,
                    private_l2,
                })
            })
            .collect::<Result<Vec<_>, ConfigError>>()?;
        let shared_l2 = match cfg.topology {
            Topology::SharedL2 { l2, hart_tagged: true } => {
                Some(Tlb::new(l2).map_err(geometry_err("topology.l2"))?.with_hart_interleave(cfg.harts))
            }
            Topology::SharedL2 { l2, .. } | Topology::SharedL2GlobalAsid { l2 } => {
                Some(Tlb::new(l2).map_err(geometry_err("topology.l2"))?)
            }
            _ => None,
        };
        let l2_tags = match cfg.topology {
            Topology::L1Only => None,
            Topology::SharedL2GlobalAsid { .. } => {
                Some(L2Tags::Global(GlobalAsidMatcher { impl_defined: cfg.impl_defined }))
            }
            _ => Some(L2Tags::Exact),
        };
        let monitor = Arc::new(Monitor {
            history: PteHistory::default(),
            validator: cfg.validators.then(|| Mutex::new(Validator::default())),
            collecting: AtomicBool::new(false),
            collector: Mutex::new(None),
        });
        mem.add_observer(monitor.clone());
        Ok(System { cfg, mem, harts, shared_l2, l2_tags, l0_callbacks: Vec::new(), monitor })
    }

    pub fn config(&self) -> &SystemConfig {
        &self.cfg
    }

    pub fn memory(&self) -> &Arc<SparseMemory> {
        &self.mem
    }

    pub fn hart_count(&self) -> usize {
        self.harts.len()
    }

    pub fn hart(&self, id: u16) -> Option<&HartContext> {
        self.harts.get(id as usize)
    }

    pub(crate) fn hart_or_err(&self, id: u16) -> Result<&HartContext, TranslateError> {
        self.hart(id).ok_or(TranslateError::UnknownHart(id))
    }

    pub fn shared_l2(&self) -> Option<&Tlb> {
        self.shared_l2.as_ref()
    }

    /// Registers an L0 invalidation hook. Must be called before simulation starts.
    pub fn register_l0_invalidate(&mut self, callback: impl Fn(L0Invalidation) + Send + Sync + 'static) {
        self.l0_callbacks.push(Box::new(callback));
    }

    /// Starts logging every event to `sink` in the binary trace format.
    pub fn attach_collector(&self, sink: Box<dyn Write + Send>) -> std::io::Result<()> {
        let writer = TraceWriter::new(sink)?;
        *self.monitor.collector.lock() = Some(TraceCollector { writer, error: None });
        self.monitor.collecting.store(true, Ordering::Release);
        Ok(())
    }

    /// Stops collection, flushes, and returns the number of records written.
    pub fn detach_collector(&self) -> std::io::Result<u64> {
        self.monitor.collecting.store(false, Ordering::Release);
        match self.monitor.collector.lock().take() {
            Some(TraceCollector { error: Some(e), .. }) => Err(e),
            Some(TraceCollector { writer, .. }) => {
                let n = writer.records_written();
                writer.finish()?.flush()?;
                Ok(n)
            }
            None => Ok(0),
        }
    }

    /// Asid domain of `hart` given its current MASI value.
    pub fn space(&self, hart: u16, masi: u64) -> AsidSpace {
        if self.cfg.topology.is_global_asid() {
            AsidSpace { hart: None, masi }
        } else {
            AsidSpace { hart: Some(hart), masi: 0 }
        }
    }

    /// ASID tag within [`System::space`]. In the global space ASID 0 is
    /// mapped to a tag unique to the hart.
    pub fn domain_asid(&self, hart: u16, asid: u16) -> u32 {
        if self.cfg.topology.is_global_asid() && asid == 0 {
            SYNTHETIC_ASID_BASE + hart as u32
        } else {
            asid as u32
        }
    }

    pub(crate) fn hart_space(&self, ctx: &HartContext) -> AsidSpace {
        self.space(ctx.id, ctx.masi.read())
    }

    pub fn write_satp(&self, hart: u16, satp: Satp) -> Result<Satp, TranslateError> {
        let ctx = self.hart_or_err(hart)?;
        let prev = Satp::from_raw(ctx.satp.swap(satp.to_raw(), Ordering::AcqRel)).unwrap_or_default();
        if let Some(v) = &self.monitor.validator {
            if satp.mode() != PagingMode::Bare {
                let space = self.hart_space(ctx);
                v.lock().on_satp_write(hart, space, self.domain_asid(hart, satp.asid()), satp.asid(), satp.root_ppn());
            }
        }
        self.monitor.record(TraceRecord::satp_write(hart, satp.to_raw()));
        Ok(prev)
    }

    /// WARL write to a hart's MASI CSR.
    pub fn write_masi(&self, hart: u16, value: u64) -> Result<(), TranslateError> {
        self.hart_or_err(hart)?.masi.write(value);
        Ok(())
    }

    pub fn set_vmid(&self, hart: u16, vmid: u16) -> Result<(), TranslateError> {
        self.hart_or_err(hart)?.vmid.store(vmid, Ordering::Relaxed);
        Ok(())
    }

    /// Writes a page-table word on behalf of the OS, notifying the fence
    /// history, validators and trace collector.
    pub fn write_pte(&self, paddr: u64, value: u64) -> Result<u64, MemoryError> {
        crate::walk::write_pte(&self.mem, paddr, value)
    }

    /// Replays a recorded PTE write using the recorded previous value.
    pub(crate) fn replay_pte_write(&self, paddr: u64, old: u64, new: u64) -> Result<(), MemoryError> {
        self.mem.write_u64(paddr, new)?;
        self.mem.notify(&PteMutation { paddr, old, new });
        Ok(())
    }

    pub fn retire(&self, hart: u16, instructions: u64, memory_accesses: u64) -> Result<(), TranslateError> {
        self.hart_or_err(hart)?.counters.retire(instructions, memory_accesses);
        Ok(())
    }

    /// Applies one event. Translation faults are normal outcomes and only counted.
    pub fn execute(&self, event: &Event) -> Result<(), SimError> {
        match *event {
            Event::Access { hart, vaddr, access } => self.access(hart, vaddr, access, LeafSource::Walk),
            Event::Fence(op) => self.sfence(op).map(|_| ()).map_err(|_| SimError::UnknownHart(op.hart)),
            Event::SatpWrite { hart, satp } => {
                self.write_satp(hart, satp).map(|_| ()).map_err(|_| SimError::UnknownHart(hart))
            }
            Event::PteWrite { paddr, value } => self.write_pte(paddr, value).map(|_| ()).map_err(Into::into),
        }
    }

    /// Translates and retires one instruction, as the ISA simulator would on an L0 miss.
    pub(crate) fn access(&self, hart: u16, vaddr: u64, access: AccessType, source: LeafSource) -> Result<(), SimError> {
        match self.translate_from(hart, vaddr, access, source) {
            Err(TranslateError::UnknownHart(h)) => return Err(SimError::UnknownHart(h)),
            Ok(_) | Err(TranslateError::Fault(_)) => {}
        }
        let memory = u64::from(access != AccessType::Fetch);
        self.harts[hart as usize].counters.retire(1, memory);
        Ok(())
    }

    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot::from_harts(self.harts.iter().map(|h| h.counters.snapshot()).collect())
    }

    pub fn violations(&self) -> Vec<Violation> {
        self.monitor.validator.as_ref().map(|v| v.lock().violations().to_vec()).unwrap_or_default()
    }

    pub fn history(&self) -> &PteHistory {
        &self.monitor.history
    }

    /// Whether `hart`'s L1 on the `access` side holds a translation for
    /// `vpn` under `asid`, without touching counters.
    pub fn l1_holds(&self, hart: u16, access: AccessType, vpn: u64, asid: u16) -> bool {
        let Some(ctx) = self.hart(hart) else { return false };
        let key = LookupKey {
            vpn,
            asid: asid as u32,
            hart_tag: Some(hart),
            masi_tag: ctx.masi.read(),
            vmid: ctx.vmid(),
            access,
        };
        ctx.l1(access).probe(&key, &ExactTags).is_some()
    }

    pub fn translate(&self, hart: u16, vaddr: u64, access: AccessType) -> Result<Translated, TranslateError> {
        self.translate_from(hart, vaddr, access, LeafSource::Walk)
    }

    pub(crate) fn translate_from(
        &self,
        hart: u16,
        vaddr: u64,
        access: AccessType,
        source: LeafSource,
    ) -> Result<Translated, TranslateError> {
        let ctx = self.hart_or_err(hart)?;
        let mut note = LeafNote::default();
        let result = self.translate_inner(ctx, vaddr, access, source, &mut note);
        if let Err(kind) = result {
            ctx.counters.add_fault(kind);
        }
        self.monitor.record(TraceRecord::access(hart, access, vaddr, note.level, note.pte_addr, note.pte));
        result.map_err(TranslateError::Fault)
    }

    fn invalidate_l0(&self, hart: &HartContext, entries: &[TlbEntry]) {
        for e in entries {
            let inv = L0Invalidation { hart: hart.id, vpn: e.vpn, level: e.level };
            for cb in &self.l0_callbacks {
                cb(inv);
            }
        }
        hart.counters.add_l0_invalidations(entries.len() as u64);
    }

    fn fill_l1(&self, ctx: &HartContext, access: AccessType, entry: TlbEntry) {
        if let InsertOutcome::Evicted(victim) = ctx.l1(access).insert(entry) {
            ctx.counters.level(l1_level(access)).evictions.fetch_add(1, Ordering::Relaxed);
            self.invalidate_l0(ctx, &[victim]);
        }
    }

    fn l2_of<'a>(&'a self, ctx: &'a HartContext) -> Option<&'a Tlb> {
        ctx.private_l2.as_ref().or(self.shared_l2.as_ref())
    }

    /// Rewrites L1-form tags into the L2's tagging scheme.
    fn l2_form(&self, mut entry: TlbEntry, hart: u16, asid: u16) -> TlbEntry {
        match self.cfg.topology {
            Topology::PrivateL2 { .. } | Topology::SharedL2 { hart_tagged: true, .. } => entry,
            Topology::SharedL2 { hart_tagged: false, .. } => {
                entry.hart_tag = None;
                entry
            }
            Topology::SharedL2GlobalAsid { .. } => {
                entry.hart_tag = None;
                entry.asid = self.domain_asid(hart, asid);
                entry
            }
            Topology::L1Only => unreachable!(),
        }
    }

    fn fill_l2(&self, ctx: &HartContext, l2: &Tlb, entry: TlbEntry, asid: u16) {
        if let InsertOutcome::Evicted(_) = l2.insert(self.l2_form(entry, ctx.id, asid)) {
            ctx.counters.level(Level::L2).evictions.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn use_cached(&self, entry: &TlbEntry, access: AccessType) -> CachedUse {
        if entry.negative {
            return CachedUse::Fault(FaultKind::InvalidEntry);
        }
        if !entry.pte.permits(access) {
            if access == AccessType::Store && !self.cfg.walk.cache_nonwritable {
                return CachedUse::Rewalk;
            }
            return CachedUse::Fault(FaultKind::PermissionDenied);
        }
        if access == AccessType::Store && !entry.pte.flags().contains(crate::types::PteFlags::D) {
            if self.cfg.walk.update_ad {
                return CachedUse::Rewalk;
            }
            return CachedUse::Fault(FaultKind::AdRequired);
        }
        CachedUse::Use
    }

    fn translate_inner(
        &self,
        ctx: &HartContext,
        vaddr: u64,
        access: AccessType,
        source: LeafSource,
        note: &mut LeafNote,
    ) -> Result<Translated, FaultKind> {
        let satp = ctx.satp();
        let mode = satp.mode();
        if mode == PagingMode::Bare {
            return Ok(Translated { paddr: vaddr, level: 0 });
        }
        if !is_canonical(vaddr, mode) {
            return Err(FaultKind::NonCanonical);
        }
        let vpn = vpn_of(vaddr, mode);
        let asid = satp.asid();
        let masi = ctx.masi.read();
        let vmid = ctx.vmid();
        let space = self.space(ctx.id, masi);
        let domain_asid = self.domain_asid(ctx.id, asid);
        if let Some(v) = &self.monitor.validator {
            v.lock().on_access(ctx.id, space, domain_asid, vmid, vpn, access);
        }

        let key = LookupKey { vpn, asid: asid as u32, hart_tag: Some(ctx.id), masi_tag: masi, vmid, access };
        let hit = ctx.l1(access).lookup(&key, &ExactTags);
        ctx.counters.level(l1_level(access)).record_lookup(hit.is_some());
        if let Some(entry) = hit {
            note.set(entry.pte, entry.level, entry.pte_addr);
            match self.use_cached(&entry, access) {
                CachedUse::Use => return Ok(translated(&entry, vaddr)),
                CachedUse::Fault(kind) => return Err(kind),
                CachedUse::Rewalk => {}
            }
        } else if let (Some(l2), Some(tags)) = (self.l2_of(ctx), &self.l2_tags) {
            let l2_key = LookupKey { asid: self.l2_form_asid(ctx.id, asid), hart_tag: self.l2_hart_tag(ctx.id), ..key };
            let hit = l2.lookup(&l2_key, tags);
            ctx.counters.level(Level::L2).record_lookup(hit.is_some());
            if let Some(e2) = hit {
                note.set(e2.pte, e2.level, e2.pte_addr);
                match self.use_cached(&e2, access) {
                    CachedUse::Use => {
                        let e1 = TlbEntry { hart_tag: Some(ctx.id), asid: asid as u32, masi_tag: masi, vmid, ..e2 };
                        self.fill_l1(ctx, access, e1);
                        return Ok(translated(&e1, vaddr));
                    }
                    CachedUse::Fault(kind) => return Err(kind),
                    CachedUse::Rewalk => {}
                }
            }
        }

        ctx.counters.add_walk();
        let result = match source {
            LeafSource::Walk => walk(&self.mem, satp, vaddr, access, &self.cfg.walk),
            LeafSource::Recorded { pte, level, pte_addr } => {
                resolve_leaf(pte, level, pte_addr, vaddr, access, &self.cfg.walk, mode, None)
            }
        };
        self.monitor.history.record_walk(space, domain_asid, vpn, &result);

        let base = TlbEntry {
            vpn,
            level: 0,
            pte: PageTableEntry::default(),
            asid: asid as u32,
            global: false,
            hart_tag: Some(ctx.id),
            masi_tag: masi,
            vmid,
            negative: false,
            origin_hart: ctx.id,
            pte_addr: 0,
        };
        match result {
            WalkResult::Success(t) => {
                note.set(t.pte, t.level, t.pte_addr);
                let (level, vpn_base, pte) = if mode == PagingMode::Sv32 && t.level > 0 {
                    // 4 MiB pages do not fit the 9-bit-per-level TLB indexing;
                    // cache the touched 4 KiB fragment instead.
                    (0, vpn, PageTableEntry::new(t.pte.flags(), t.paddr >> PAGE_SHIFT))
                } else {
                    (t.level, level_base(vpn, t.level), t.pte)
                };
                let entry =
                    TlbEntry { vpn: vpn_base, level, pte, global: pte.is_global(), pte_addr: t.pte_addr, ..base };
                if let Some(l2) = self.l2_of(ctx) {
                    self.fill_l2(ctx, l2, entry, asid);
                }
                self.fill_l1(ctx, access, entry);
                if let Some(v) = &self.monitor.validator {
                    let ideal = TlbEntry { hart_tag: space.hart, asid: domain_asid, masi_tag: space.masi, ..entry };
                    v.lock().on_fill(ideal);
                }
                Ok(Translated { paddr: t.paddr, level: t.level })
            }
            WalkResult::Fault(f) => {
                note.set(f.pte, f.level, f.pte_addr.unwrap_or(0));
                if f.kind == FaultKind::InvalidEntry && self.cfg.walk.cache_invalid {
                    if let Some(pte_addr) = f.pte_addr {
                        let level = if mode == PagingMode::Sv32 { 0 } else { f.level };
                        let entry = TlbEntry {
                            vpn: level_base(vpn, level),
                            level,
                            pte: f.pte,
                            negative: true,
                            pte_addr,
                            ..base
                        };
                        if let Some(l2) = self.l2_of(ctx) {
                            self.fill_l2(ctx, l2, entry, asid);
                        }
                        self.fill_l1(ctx, access, entry);
                    }
                }
                Err(f.kind)
            }
        }
    }

    fn l2_form_asid(&self, hart: u16, asid: u16) -> u32 {
        match self.cfg.topology {
            Topology::SharedL2GlobalAsid { .. } => self.domain_asid(hart, asid),
            _ => asid as u32,
        }
    }

    pub(crate) fn l2_hart_tag(&self, hart: u16) -> Option<u16> {
        match self.cfg.topology {
            Topology::PrivateL2 { .. } | Topology::SharedL2 { hart_tagged: true, .. } => Some(hart),
            _ => None,
        }
    }

    pub(crate) fn l2_for_hart<'a>(&'a self, ctx: &'a HartContext) -> Option<&'a Tlb> {
        self.l2_of(ctx)
    }

    pub(crate) fn flush_l1s(&self, ctx: &HartContext, filter: &crate::tlb::FlushFilter) -> (usize, usize) {
        let mut counts = [0usize; 2];
        for (i, (tlb, level)) in [(&ctx.l1i, Level::L1I), (&ctx.l1d, Level::L1D)].into_iter().enumerate() {
            let removed = tlb.drain_matching(filter);
            ctx.counters.level(level).flushed_entries.fetch_add(removed.len() as u64, Ordering::Relaxed);
            self.invalidate_l0(ctx, &removed);
            counts[i] = removed.len();
        }
        (counts[0], counts[1])
    }
}

fn l1_level(access: AccessType) -> Level {
    match access {
        AccessType::Fetch => Level::L1I,
        _ => Level::L1D,
    }
}

fn translated(entry: &TlbEntry, vaddr: u64) -> Translated {
    let mask = (1u64 << (LEVEL_BITS * entry.level)) - 1;
    let vpn = vaddr >> PAGE_SHIFT;
    let ppn = (entry.pte.ppn() & !mask) | (vpn & mask);
    Translated { paddr: (ppn << PAGE_SHIFT) | (vaddr & (PAGE_SIZE - 1)), level: entry.level }
}
