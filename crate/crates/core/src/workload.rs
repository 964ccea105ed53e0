//! Page-table construction and synthetic multi-hart access streams.
//!
//! Every address space uses Sv39 with this layout:
//!
//! | region  | base                              | contents                                   |
//! |---------|-----------------------------------|--------------------------------------------|
//! | code    | `0x1000_0000`                     | R+X pages shared by all processes          |
//! | shared  | `0x4000_0000`                     | RW pages mapped to the same PPNs everywhere |
//! | private | `0x10_0000_0000 + slot * 1 GiB`   | RW pages unique to a process/thread slot   |
//! | pool    | `0x30_0000_0000 + hart * 1 GiB`   | pages mutated by fence scripts             |
//!
//! With one process, slots are threads (one per hart); with several, each
//! process has a single slot. Pool page tables are shared by all processes
//! so scripted mutations do not depend on which process a hart is running.

use std::collections::VecDeque;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::event::Event;
use crate::fence::{FenceOp, FlushCategory};
use crate::memory::SparseMemory;
use crate::stats::CategoryCounts;
use crate::types::{split_vaddr, PageTableEntry, PagingMode, PteFlags, Satp, PAGE_SHIFT, PAGE_SIZE};
use crate::validate::ViolationKind;

pub const CODE_BASE: u64 = 0x1000_0000;
pub const SHARED_BASE: u64 = 0x4000_0000;
pub const PRIVATE_BASE: u64 = 0x10_0000_0000;
pub const POOL_BASE: u64 = 0x30_0000_0000;
const REGION_STRIDE: u64 = 0x4000_0000;
const MAX_SCRIPT_HARTS: usize = 64;

/// Hands out physical frames: page-table frames from one range, data frames from another.
#[derive(Debug, Clone)]
pub struct FrameAllocator {
    next_table: u64,
    next_data: u64,
}

impl Default for FrameAllocator {
    fn default() -> Self {
        FrameAllocator { next_table: 0x80000, next_data: 0x200000 }
    }
}

impl FrameAllocator {
    pub fn table(&mut self) -> u64 {
        let p = self.next_table;
        self.next_table += 1;
        p
    }

    /// A data frame aligned for a leaf at `level`.
    pub fn data(&mut self, level: u32) -> u64 {
        let align = 1u64 << (9 * level);
        let p = (self.next_data + align - 1) & !(align - 1);
        self.next_data = p + align;
        p
    }
}

fn write_word(mem: &SparseMemory, mode: PagingMode, addr: u64, raw: u64) {
    match mode {
        PagingMode::Sv32 => mem.write_u32(addr, raw as u32).map(|_| ()),
        _ => mem.write_u64(addr, raw).map(|_| ()),
    }
    .expect("page-table slots are aligned");
}

fn read_word(mem: &SparseMemory, mode: PagingMode, addr: u64) -> u64 {
    match mode {
        PagingMode::Sv32 => mem.read_u32(addr).map(u64::from),
        _ => mem.read_u64(addr),
    }
    .expect("page-table slots are aligned")
}

/// One page-table tree. Writes go straight to memory without notifying
/// observers; use it to set up state before simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AddressSpace {
    pub mode: PagingMode,
    pub root_ppn: u64,
}

impl AddressSpace {
    pub fn new(mode: PagingMode, alloc: &mut FrameAllocator) -> Self {
        assert!(mode != PagingMode::Bare);
        AddressSpace { mode, root_ppn: alloc.table() }
    }

    pub fn satp(&self, asid: u16) -> Satp {
        Satp::new(self.mode, asid as u32, self.root_ppn)
    }

    /// Address of the PTE slot for `vaddr` at `level`, creating intermediate
    /// tables as needed.
    ///
    /// # Panics
    ///
    /// If `vaddr` is not canonical or a leaf already occupies the path.
    pub fn slot(&self, mem: &SparseMemory, alloc: &mut FrameAllocator, vaddr: u64, level: u32) -> u64 {
        let parts = split_vaddr(vaddr, self.mode).expect("canonical address");
        let mut table = self.root_ppn << PAGE_SHIFT;
        let mut l = self.mode.levels() - 1;
        loop {
            let addr = table + parts.index_at(l) * self.mode.pte_size();
            if l == level {
                return addr;
            }
            let pte = PageTableEntry::from_raw(read_word(mem, self.mode, addr));
            table = if pte.is_valid() {
                assert!(!pte.is_leaf(), "leaf in the way at level {l}");
                pte.ppn() << PAGE_SHIFT
            } else {
                let ppn = alloc.table();
                write_word(mem, self.mode, addr, PageTableEntry::new(PteFlags::V, ppn).raw());
                ppn << PAGE_SHIFT
            };
            l -= 1;
        }
    }

    /// Maps `vaddr` to `ppn` with a leaf at `level` and returns the leaf's address.
    pub fn map(
        &self,
        mem: &SparseMemory,
        alloc: &mut FrameAllocator,
        vaddr: u64,
        ppn: u64,
        flags: PteFlags,
        level: u32,
    ) -> u64 {
        let addr = self.slot(mem, alloc, vaddr, level);
        write_word(mem, self.mode, addr, PageTableEntry::new(flags | PteFlags::V, ppn).raw());
        addr
    }

    /// Makes this tree use `other`'s subtree for the root slot covering `vaddr`.
    pub fn share_root_slot(&self, mem: &SparseMemory, other: &AddressSpace, vaddr: u64) {
        let top = self.mode.levels() - 1;
        let idx = split_vaddr(vaddr, self.mode).expect("canonical address").index_at(top);
        let off = idx * self.mode.pte_size();
        let raw = read_word(mem, self.mode, (other.root_ppn << PAGE_SHIFT) + off);
        write_word(mem, self.mode, (self.root_ppn << PAGE_SHIFT) + off, raw);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AsidPolicy {
    AllZero,
    PerProcess,
    PerHart,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AccessPattern {
    UniformRandom,
    Loop {
        stride: usize,
    },
    Zipf {
        #[serde(default = "default_zipf_s")]
        s: f64,
    },
}

fn default_zipf_s() -> f64 {
    0.99
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptKind {
    /// Map a page nobody has touched, fence, use it.
    MapNewPage,
    /// Touch an unmapped page, map it, fence, retry.
    DemandFault,
    /// Read a read-only page, take a write fault, remap writable, fence, write.
    CowUpgrade,
    /// Write a page, drop write permission, fence, read.
    MprotectDowngrade,
    /// Write two pages, downgrade both, full fence, then break CoW on one.
    Fork,
}

impl ScriptKind {
    /// Categories of the targeted fences this script issues.
    pub fn expected_categories(self) -> &'static [FlushCategory] {
        match self {
            ScriptKind::MapNewPage => &[FlushCategory::NeverAccessed],
            ScriptKind::DemandFault => &[FlushCategory::PreviouslyInvalid],
            ScriptKind::CowUpgrade | ScriptKind::Fork => &[FlushCategory::PreviouslyNonWritable],
            ScriptKind::MprotectDowngrade => &[FlushCategory::Necessary],
        }
    }

    fn pool_pages(self) -> usize {
        match self {
            ScriptKind::Fork => 2,
            _ => 1,
        }
    }
}

/// A scripted OS action on `hart`, issued after it has made `at` accesses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptEvent {
    pub hart: u16,
    pub at: usize,
    pub kind: ScriptKind,
}

impl ScriptEvent {
    /// `count` events of `kind`, spread round-robin over harts and evenly over `length`.
    pub fn spread(kind: ScriptKind, count: usize, harts: usize, length: usize) -> Vec<ScriptEvent> {
        (0..count).map(|i| ScriptEvent { hart: (i % harts) as u16, at: length * (i + 1) / (count + 1), kind }).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub harts: usize,
    /// Address spaces. With 1, all harts run threads of one process.
    pub processes: usize,
    /// Data pages each hart works on, shared plus private.
    pub pages_per_hart: usize,
    pub shared_fraction: f64,
    pub asid_policy: AsidPolicy,
    pub access_pattern: AccessPattern,
    /// Accesses per hart.
    pub length: usize,
    pub seed: u64,
    pub code_pages: usize,
    pub fetch_fraction: f64,
    pub store_fraction: f64,
    /// Spreads private footprints linearly from `1 - skew` to `1 + skew`
    /// times the mean across harts.
    pub footprint_skew: f64,
    /// Spreads per-hart access counts linearly from `1 - skew` to `1 + skew`
    /// times `length`.
    pub activity_skew: f64,
    /// Probability that a hart switches to another process at a burst boundary.
    pub migration: f64,
    /// Accesses between scheduling decisions.
    pub burst: usize,
    pub fence_script: Vec<ScriptEvent>,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        WorkloadSpec {
            harts: 8,
            processes: 1,
            pages_per_hart: 256,
            shared_fraction: 0.5,
            asid_policy: AsidPolicy::PerProcess,
            access_pattern: AccessPattern::UniformRandom,
            length: 100_000,
            seed: 1,
            code_pages: 8,
            fetch_fraction: 0.1,
            store_fraction: 0.3,
            footprint_skew: 0.0,
            activity_skew: 0.0,
            migration: 0.0,
            burst: 1000,
            fence_script: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("{field}: {reason}")]
    Invalid { field: &'static str, reason: String },
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SpecError {
    SpecError::Invalid { field, reason: reason.into() }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.harts == 0 || self.harts > MAX_SCRIPT_HARTS {
            return Err(invalid("harts", format!("must be in 1..={MAX_SCRIPT_HARTS}")));
        }
        if self.processes == 0 || self.processes > 1 << 15 {
            return Err(invalid("processes", "must be in 1..=32768"));
        }
        if self.pages_per_hart == 0 || self.pages_per_hart > 1 << 17 {
            return Err(invalid("pages_per_hart", "must be in 1..=131072"));
        }
        for (field, v) in [
            ("shared_fraction", self.shared_fraction),
            ("fetch_fraction", self.fetch_fraction),
            ("store_fraction", self.store_fraction),
            ("migration", self.migration),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(invalid(field, "must be within [0, 1]"));
            }
        }
        if self.fetch_fraction + self.store_fraction > 1.0 {
            return Err(invalid("store_fraction", "fetch_fraction + store_fraction exceeds 1"));
        }
        if !(0.0..1.0).contains(&self.footprint_skew) {
            return Err(invalid("footprint_skew", "must be within [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.activity_skew) {
            return Err(invalid("activity_skew", "must be within [0, 1]"));
        }
        if self.code_pages == 0 && self.fetch_fraction > 0.0 {
            return Err(invalid("code_pages", "must be positive when fetch_fraction > 0"));
        }
        if self.burst == 0 {
            return Err(invalid("burst", "must be positive"));
        }
        match self.access_pattern {
            AccessPattern::Loop { stride: 0 } => return Err(invalid("access_pattern.stride", "must be positive")),
            AccessPattern::Zipf { s } if !(s > 0.0 && s.is_finite()) => {
                return Err(invalid("access_pattern.s", "must be positive"))
            }
            _ => {}
        }
        if let Some(e) = self.fence_script.iter().find(|e| e.hart as usize >= self.harts) {
            return Err(invalid("fence_script", format!("hart {} out of range", e.hart)));
        }
        Ok(())
    }

    pub fn shared_pages(&self) -> usize {
        (self.shared_fraction * self.pages_per_hart as f64).round() as usize
    }

    /// Private pages of thread slot `slot`.
    pub fn private_pages(&self, slot: usize) -> usize {
        let mean = (self.pages_per_hart - self.shared_pages().min(self.pages_per_hart)) as f64;
        (mean * (1.0 + self.footprint_skew * spread_position(slot, self.slots()))).round() as usize
    }

    /// Accesses issued by `hart`.
    pub fn hart_length(&self, hart: u16) -> usize {
        (self.length as f64 * (1.0 + self.activity_skew * spread_position(hart as usize, self.harts))).round() as usize
    }

    fn slots(&self) -> usize {
        if self.processes == 1 {
            self.harts
        } else {
            1
        }
    }

    fn asid(&self, process: usize, hart: u16) -> u16 {
        match self.asid_policy {
            AsidPolicy::AllZero => 0,
            AsidPolicy::PerProcess => (process + 1) as u16,
            AsidPolicy::PerHart => hart + 1,
        }
    }

    /// Whether switching to another process needs a full fence first.
    fn switch_needs_fence(&self) -> bool {
        self.asid_policy != AsidPolicy::PerProcess
    }
}

/// Position of `i` among `n` on a line from -1 to 1.
fn spread_position(i: usize, n: usize) -> f64 {
    if n > 1 {
        2.0 * i as f64 / (n - 1) as f64 - 1.0
    } else {
        0.0
    }
}

fn code_vaddr(i: usize) -> u64 {
    CODE_BASE + i as u64 * PAGE_SIZE
}

fn shared_vaddr(i: usize) -> u64 {
    SHARED_BASE + i as u64 * PAGE_SIZE
}

/// First private page of `slot`. Slots are staggered so that, taken
/// together with the shared region, their VPNs cover TLB sets evenly.
fn private_base(spec: &WorkloadSpec, slot: usize) -> u64 {
    let before: usize = spec.shared_pages() + (0..slot).map(|k| spec.private_pages(k)).sum::<usize>();
    PRIVATE_BASE + slot as u64 * REGION_STRIDE + (before % (1 << 17)) as u64 * PAGE_SIZE
}

pub fn pool_vaddr(hart: u16, i: usize) -> u64 {
    POOL_BASE + hart as u64 * REGION_STRIDE + i as u64 * PAGE_SIZE
}

const DATA_RW: PteFlags = PteFlags::R.union(PteFlags::W).union(PteFlags::A).union(PteFlags::D);
const DATA_RO: PteFlags = PteFlags::R.union(PteFlags::A);
const CODE: PteFlags = PteFlags::R.union(PteFlags::X).union(PteFlags::A);

fn leaf(flags: PteFlags, ppn: u64) -> u64 {
    PageTableEntry::new(flags | PteFlags::V, ppn).raw()
}

/// Address spaces plus the recipe for each hart's event stream.
#[derive(Debug, Clone)]
pub struct Workload {
    spec: WorkloadSpec,
    spaces: Vec<AddressSpace>,
    scripts: Vec<Vec<(usize, Vec<Event>)>>,
    expected: CategoryCounts,
}

impl Workload {
    /// Builds page tables in `mem` and plans the streams.
    pub fn build(spec: &WorkloadSpec, mem: &SparseMemory) -> Result<Self, SpecError> {
        spec.validate()?;
        let mode = PagingMode::Sv39;
        let mut alloc = FrameAllocator::default();
        let spaces: Vec<AddressSpace> = (0..spec.processes).map(|_| AddressSpace::new(mode, &mut alloc)).collect();

        let code: Vec<u64> = (0..spec.code_pages).map(|_| alloc.data(0)).collect();
        let shared: Vec<u64> = (0..spec.shared_pages()).map(|_| alloc.data(0)).collect();
        for space in &spaces {
            for (i, &ppn) in code.iter().enumerate() {
                space.map(mem, &mut alloc, code_vaddr(i), ppn, CODE, 0);
            }
            for (i, &ppn) in shared.iter().enumerate() {
                space.map(mem, &mut alloc, shared_vaddr(i), ppn, DATA_RW, 0);
            }
            for slot in 0..spec.slots() {
                let base = private_base(spec, slot);
                for i in 0..spec.private_pages(slot) {
                    let ppn = alloc.data(0);
                    space.map(mem, &mut alloc, base + i as u64 * PAGE_SIZE, ppn, DATA_RW, 0);
                }
            }
        }

        let mut per_hart: Vec<Vec<ScriptEvent>> = vec![Vec::new(); spec.harts];
        for e in &spec.fence_script {
            per_hart[e.hart as usize].push(*e);
        }
        let mut expected = CategoryCounts::default();
        let mut scripts = Vec::with_capacity(spec.harts);
        for (hart, events) in per_hart.iter_mut().enumerate() {
            events.sort_by_key(|e| e.at);
            let hart = hart as u16;
            let mut next_slot = 0;
            let mut plan = Vec::new();
            for e in events.iter() {
                let pages: Vec<(u64, u64)> = (0..e.kind.pool_pages())
                    .map(|k| {
                        let va = pool_vaddr(hart, next_slot + k);
                        (va, spaces[0].slot(mem, &mut alloc, va, 0))
                    })
                    .collect();
                next_slot += pages.len();
                plan.push((e.at.min(spec.hart_length(hart)), expand(mem, &mut alloc, hart, e.kind, &pages)));
                for c in e.kind.expected_categories() {
                    add_category(&mut expected, *c);
                }
            }
            if next_slot > 0 {
                for space in &spaces[1..] {
                    space.share_root_slot(mem, &spaces[0], pool_vaddr(hart, 0));
                }
            }
            scripts.push(plan);
        }
        Ok(Workload { spec: spec.clone(), spaces, scripts, expected })
    }

    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn spaces(&self) -> &[AddressSpace] {
        &self.spaces
    }

    pub fn satp(&self, process: usize, hart: u16) -> Satp {
        self.spaces[process].satp(self.spec.asid(process, hart))
    }

    /// Targeted-fence categories the scripts are built to produce.
    pub fn expected_categories(&self) -> CategoryCounts {
        self.expected
    }

    /// Accesses, fences and PTE writes issued by `hart`, generated lazily.
    pub fn hart_stream(&self, hart: u16) -> HartStream<'_> {
        let spec = &self.spec;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(hart as u64);
        let process = hart as usize % spec.processes;
        let slot = if spec.processes == 1 { hart as usize } else { 0 };
        let shared = spec.shared_pages();
        let pages = shared + spec.private_pages(slot);
        let zipf = match spec.access_pattern {
            AccessPattern::Zipf { s } if pages > 0 => Some(Zipf::new(pages as u64, s).expect("validated")),
            _ => None,
        };
        let mut ranks: Vec<usize> = (0..pages).collect();
        if zipf.is_some() {
            ranks.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ pages as u64));
        }
        HartStream {
            workload: self,
            hart,
            rng,
            zipf,
            ranks,
            pending: VecDeque::new(),
            started: false,
            accesses: 0,
            next_script: 0,
            process,
            private_base: private_base(spec, slot),
            length: spec.hart_length(hart),
            shared,
            pages,
        }
    }

    /// All streams, materialized.
    pub fn streams(&self) -> Vec<Vec<Event>> {
        (0..self.spec.harts as u16).map(|h| self.hart_stream(h).collect()).collect()
    }

    /// Round-robin merge of all streams into one total order.
    pub fn interleaved(&self) -> Vec<Event> {
        interleave((0..self.spec.harts as u16).map(|h| self.hart_stream(h)).collect())
    }
}

/// Merges streams by taking one event from each in turn.
pub fn interleave<I: Iterator<Item = Event>>(mut streams: Vec<I>) -> Vec<Event> {
    let mut out = Vec::new();
    let mut live = streams.len();
    let mut done = vec![false; streams.len()];
    while live > 0 {
        for (i, s) in streams.iter_mut().enumerate() {
            if done[i] {
                continue;
            }
            match s.next() {
                Some(e) => out.push(e),
                None => {
                    done[i] = true;
                    live -= 1;
                }
            }
        }
    }
    out
}

fn add_category(c: &mut CategoryCounts, cat: FlushCategory) {
    match cat {
        FlushCategory::NeverAccessed => c.never_accessed += 1,
        FlushCategory::PreviouslyInvalid => c.previously_invalid += 1,
        FlushCategory::PreviouslyNonWritable => c.previously_nonwritable += 1,
        FlushCategory::Necessary => c.necessary += 1,
    }
}

/// Sets the pool pages' initial state and returns the script's events.
fn expand(
    mem: &SparseMemory,
    alloc: &mut FrameAllocator,
    hart: u16,
    kind: ScriptKind,
    pages: &[(u64, u64)],
) -> Vec<Event> {
    let (va, slot) = pages[0];
    let ppn = alloc.data(0);
    let set = |addr: u64, raw: u64| write_word(mem, PagingMode::Sv39, addr, raw);
    let write = |addr: u64, raw: u64| Event::PteWrite { paddr: addr, value: raw };
    let fence = |va: u64| Event::Fence(FenceOp::vaddr(hart, va));
    match kind {
        ScriptKind::MapNewPage => {
            set(slot, 0);
            vec![write(slot, leaf(DATA_RW, ppn)), fence(va), Event::store(hart, va)]
        }
        ScriptKind::DemandFault => {
            set(slot, 0);
            vec![Event::load(hart, va), write(slot, leaf(DATA_RW, ppn)), fence(va), Event::load(hart, va)]
        }
        ScriptKind::CowUpgrade => {
            set(slot, leaf(DATA_RO, ppn));
            let copy = alloc.data(0);
            vec![
                Event::load(hart, va),
                Event::store(hart, va),
                write(slot, leaf(DATA_RW, copy)),
                fence(va),
                Event::store(hart, va),
            ]
        }
        ScriptKind::MprotectDowngrade => {
            set(slot, leaf(DATA_RW, ppn));
            vec![
                Event::store(hart, va),
                write(slot, leaf(DATA_RO | PteFlags::D, ppn)),
                fence(va),
                Event::load(hart, va),
            ]
        }
        ScriptKind::Fork => {
            let (va2, slot2) = pages[1];
            let ppn2 = alloc.data(0);
            let copy = alloc.data(0);
            set(slot, leaf(DATA_RW, ppn));
            set(slot2, leaf(DATA_RW, ppn2));
            vec![
                Event::store(hart, va),
                Event::store(hart, va2),
                write(slot, leaf(DATA_RO | PteFlags::D, ppn)),
                write(slot2, leaf(DATA_RO | PteFlags::D, ppn2)),
                Event::Fence(FenceOp::full(hart)),
                Event::store(hart, va),
                write(slot, leaf(DATA_RW, copy)),
                fence(va),
                Event::store(hart, va),
                Event::load(hart, va2),
            ]
        }
    }
}

/// Lazily generated event stream of one hart.
pub struct HartStream<'a> {
    workload: &'a Workload,
    hart: u16,
    rng: ChaCha8Rng,
    zipf: Option<Zipf<f64>>,
    ranks: Vec<usize>,
    pending: VecDeque<Event>,
    started: bool,
    accesses: usize,
    next_script: usize,
    process: usize,
    private_base: u64,
    length: usize,
    shared: usize,
    pages: usize,
}

impl HartStream<'_> {
    fn switch_to(&mut self, process: usize) {
        let spec = &self.workload.spec;
        if self.started && spec.switch_needs_fence() {
            self.pending.push_back(Event::Fence(FenceOp::full(self.hart)));
        }
        self.process = process;
        self.pending.push_back(Event::SatpWrite { hart: self.hart, satp: self.workload.satp(process, self.hart) });
    }

    fn data_vaddr(&mut self) -> u64 {
        let idx = match self.workload.spec.access_pattern {
            AccessPattern::UniformRandom => self.rng.gen_range(0..self.pages),
            AccessPattern::Loop { stride } => (self.accesses * stride) % self.pages,
            AccessPattern::Zipf { .. } => {
                let rank = self.zipf.as_ref().unwrap().sample(&mut self.rng) as usize - 1;
                self.ranks[rank.min(self.pages - 1)]
            }
        };
        let page = if idx < self.shared {
            shared_vaddr(idx)
        } else {
            self.private_base + (idx - self.shared) as u64 * PAGE_SIZE
        };
        page + self.rng.gen_range(0..512u64) * 8
    }

    fn refill(&mut self) -> bool {
        let spec = &self.workload.spec;
        if !self.started {
            // An idle hart never installs its address space.
            if self.length == 0 && self.workload.scripts[self.hart as usize].is_empty() {
                return false;
            }
            self.switch_to(self.process);
            self.started = true;
            return true;
        }
        let scripts = &self.workload.scripts[self.hart as usize];
        while self.next_script < scripts.len() && scripts[self.next_script].0 <= self.accesses {
            self.pending.extend(scripts[self.next_script].1.iter().copied());
            self.next_script += 1;
        }
        if self.accesses >= self.length {
            return !self.pending.is_empty();
        }
        if spec.processes > 1
            && self.accesses > 0
            && self.accesses.is_multiple_of(spec.burst)
            && spec.migration > 0.0
            && self.rng.gen::<f64>() < spec.migration
        {
            let other = self.rng.gen_range(0..spec.processes - 1);
            let next = if other >= self.process { other + 1 } else { other };
            self.switch_to(next);
        }
        let r: f64 = self.rng.gen();
        let event = if r < spec.fetch_fraction {
            let page = self.rng.gen_range(0..spec.code_pages);
            Event::fetch(self.hart, code_vaddr(page) + self.rng.gen_range(0..1024u64) * 4)
        } else if self.pages == 0 {
            Event::fetch(self.hart, code_vaddr(0))
        } else if r < spec.fetch_fraction + spec.store_fraction {
            Event::store(self.hart, self.data_vaddr())
        } else {
            Event::load(self.hart, self.data_vaddr())
        };
        self.pending.push_back(event);
        self.accesses += 1;
        true
    }
}

impl Iterator for HartStream<'_> {
    type Item = Event;

    fn next(&mut self) -> Option<Event> {
        loop {
            if let Some(e) = self.pending.pop_front() {
                return Some(e);
            }
            if !self.refill() {
                return None;
            }
        }
    }
}

/// A fence the OS must issue, and what a validator reports if it is dropped.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RequiredFence {
    /// Index into [`ValidationScenario::events`].
    pub index: usize,
    pub expected: Vec<ViolationKind>,
}

/// A compliant event sequence annotated with its required fences.
#[derive(Debug, Clone)]
pub struct ValidationScenario {
    pub events: Vec<Event>,
    pub required: Vec<RequiredFence>,
    pub harts: usize,
}

impl ValidationScenario {
    /// Events with the fence at `events[index]` removed.
    pub fn without(&self, index: usize) -> Vec<Event> {
        let mut v = self.events.clone();
        v.remove(index);
        v
    }
}

/// Builds a two-hart scenario with `rounds` each of a permission downgrade,
/// a copy-on-write remap and an ASID reuse, interleaved with random traffic.
pub fn validation_scenario(mem: &SparseMemory, seed: u64, rounds: usize) -> ValidationScenario {
    let mode = PagingMode::Sv39;
    let mut alloc = FrameAllocator::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = AddressSpace::new(mode, &mut alloc);
    let harts = 2u16;
    let data_pages = 16;
    for i in 0..data_pages {
        let ppn = alloc.data(0);
        base.map(mem, &mut alloc, shared_vaddr(i), ppn, DATA_RW, 0);
    }
    let mut events: Vec<Event> = (0..harts).map(|h| Event::SatpWrite { hart: h, satp: base.satp(1) }).collect();
    let mut required = Vec::new();
    let mut pool = 0usize;
    let traffic = |events: &mut Vec<Event>, rng: &mut ChaCha8Rng, n: usize| {
        for _ in 0..n {
            let hart = rng.gen_range(0..harts);
            let va = shared_vaddr(rng.gen_range(0..data_pages));
            events.push(if rng.gen_bool(0.3) { Event::store(hart, va) } else { Event::load(hart, va) });
        }
    };

    for round in 0..rounds {
        let hart = (round % harts as usize) as u16;
        traffic(&mut events, &mut rng, 20);

        let va = pool_vaddr(0, pool);
        pool += 1;
        let ppn = alloc.data(0);
        let slot = base.map(mem, &mut alloc, va, ppn, DATA_RW, 0);
        events.push(Event::store(hart, va));
        events.push(Event::PteWrite { paddr: slot, value: leaf(DATA_RO | PteFlags::D, ppn) });
        required.push(RequiredFence { index: events.len(), expected: vec![ViolationKind::StalePteUpdate] });
        events.push(Event::Fence(FenceOp::vaddr(hart, va)));
        events.push(Event::load(hart, va));
        traffic(&mut events, &mut rng, 20);

        let va = pool_vaddr(0, pool);
        pool += 1;
        let ppn = alloc.data(0);
        let slot = base.map(mem, &mut alloc, va, ppn, DATA_RO, 0);
        events.push(Event::load(hart, va));
        events.push(Event::PteWrite { paddr: slot, value: leaf(DATA_RW, alloc.data(0)) });
        required.push(RequiredFence { index: events.len(), expected: vec![ViolationKind::StalePteUpdate] });
        events.push(Event::Fence(FenceOp::vaddr(hart, va)));
        events.push(Event::store(hart, va));
        traffic(&mut events, &mut rng, 20);

        let asid = 100 + round as u16;
        let a = AddressSpace::new(mode, &mut alloc);
        let b = AddressSpace::new(mode, &mut alloc);
        let va = shared_vaddr(data_pages + round);
        for space in [&a, &b] {
            let ppn = alloc.data(0);
            space.map(mem, &mut alloc, va, ppn, DATA_RW, 0);
        }
        events.push(Event::SatpWrite { hart, satp: a.satp(asid) });
        events.push(Event::load(hart, va));
        required.push(RequiredFence { index: events.len(), expected: vec![ViolationKind::AsidReuseWithoutFlush] });
        events.push(Event::Fence(FenceOp::asid(hart, asid)));
        events.push(Event::SatpWrite { hart, satp: b.satp(asid) });
        events.push(Event::load(hart, va));
        events.push(Event::SatpWrite { hart, satp: base.satp(1) });
    }
    traffic(&mut events, &mut rng, 20);
    ValidationScenario { events, required, harts: harts as usize }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::AccessType;
    use crate::walk::{walk, WalkConfig, WalkResult};

    fn resolve(mem: &SparseMemory, satp: Satp, va: u64) -> WalkResult {
        walk(mem, satp, va, AccessType::Load, &WalkConfig::default())
    }

    #[test]
    fn single_page_walks_at_level_zero() {
        let mem = SparseMemory::new();
        let spec = WorkloadSpec { harts: 1, pages_per_hart: 1, shared_fraction: 0.0, ..Default::default() };
        let w = Workload::build(&spec, &mem).unwrap();
        match resolve(&mem, w.satp(0, 0), private_base(&spec, 0)) {
            WalkResult::Success(t) => assert_eq!(t.level, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn shared_region_has_common_ppns() {
        let mem = SparseMemory::new();
        let spec =
            WorkloadSpec { harts: 2, processes: 2, pages_per_hart: 4, shared_fraction: 1.0, ..Default::default() };
        let w = Workload::build(&spec, &mem).unwrap();
        for i in 0..4 {
            let (WalkResult::Success(a), WalkResult::Success(b)) =
                (resolve(&mem, w.satp(0, 0), shared_vaddr(i)), resolve(&mem, w.satp(1, 0), shared_vaddr(i)))
            else {
                panic!("unmapped shared page");
            };
            assert_eq!(a.paddr, b.paddr);
            assert_ne!(a.pte_addr, b.pte_addr);
            assert!(!a.pte.is_global());
        }
    }

    #[test]
    fn superpage_leaf_is_aligned() {
        let mem = SparseMemory::new();
        let mut alloc = FrameAllocator::default();
        let space = AddressSpace::new(PagingMode::Sv39, &mut alloc);
        let ppn = alloc.data(1);
        assert_eq!(ppn % 512, 0);
        space.map(&mem, &mut alloc, 0x4020_0000, ppn, DATA_RW, 1);
        match resolve(&mem, space.satp(0), 0x4020_1234) {
            WalkResult::Success(t) => {
                assert_eq!(t.level, 1);
                assert_eq!(t.paddr, (ppn << 12) + 0x1234);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn streams_are_deterministic() {
        let spec = WorkloadSpec {
            harts: 3,
            processes: 4,
            migration: 0.5,
            burst: 10,
            access_pattern: AccessPattern::Zipf { s: 0.99 },
            length: 500,
            fence_script: ScriptEvent::spread(ScriptKind::Fork, 3, 3, 500),
            ..Default::default()
        };
        let a = Workload::build(&spec, &SparseMemory::new()).unwrap().interleaved();
        let b = Workload::build(&spec, &SparseMemory::new()).unwrap().interleaved();
        assert_eq!(a, b);
        let accesses = a.iter().filter(|e| matches!(e, Event::Access { .. })).count();
        assert_eq!(accesses, 3 * 500 + 3 * 5);
    }

    #[test]
    fn loop_pattern_cycles() {
        let spec = WorkloadSpec {
            harts: 1,
            pages_per_hart: 4,
            shared_fraction: 0.0,
            fetch_fraction: 0.0,
            access_pattern: AccessPattern::Loop { stride: 1 },
            length: 8,
            ..Default::default()
        };
        let w = Workload::build(&spec, &SparseMemory::new()).unwrap();
        let pages: Vec<u64> = w
            .hart_stream(0)
            .filter_map(|e| match e {
                Event::Access { vaddr, .. } => Some(vaddr >> 12),
                _ => None,
            })
            .collect();
        assert_eq!(pages[..4], pages[4..]);
    }

    #[test]
    fn skew_preserves_total() {
        let spec = WorkloadSpec {
            harts: 8,
            pages_per_hart: 100,
            shared_fraction: 0.2,
            footprint_skew: 0.5,
            ..Default::default()
        };
        let total: usize = (0..8).map(|s| spec.private_pages(s)).sum();
        assert_eq!(total, 8 * 80);
        assert!(spec.private_pages(0) < spec.private_pages(7));
    }

    #[test]
    fn bad_specs_name_the_field() {
        let spec = WorkloadSpec { shared_fraction: 1.5, ..Default::default() };
        assert!(spec.validate().unwrap_err().to_string().starts_with("shared_fraction"));
        let spec = WorkloadSpec { access_pattern: AccessPattern::Loop { stride: 0 }, ..Default::default() };
        assert!(spec.validate().is_err());
    }
}
