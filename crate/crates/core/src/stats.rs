//! Counter fabric and derived metrics.
//!
//! Each hart owns a cache-padded block of atomic counters that only its own
//! driver normally increments; snapshots sum the blocks. Individual counters
//! are never torn, but counters read during one snapshot may be skewed
//! relative to each other while drivers are running.

use std::sync::atomic::{AtomicU64, Ordering};

use crossbeam_utils::CachePadded;
use serde::{Deserialize, Serialize};

use crate::fence::{FenceShape, FlushCategory};
use crate::walk::FaultKind;

#[derive(Debug, Default)]
pub struct LevelCounters {
    pub lookups: AtomicU64,
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub evictions: AtomicU64,
    pub flushed_entries: AtomicU64,
}

impl LevelCounters {
    pub fn record_lookup(&self, hit: bool) {
        self.lookups.fetch_add(1, Ordering::Relaxed);
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn snapshot(&self) -> LevelSnapshot {
        LevelSnapshot {
            lookups: self.lookups.load(Ordering::Relaxed),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            flushed_entries: self.flushed_entries.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Level {
    L1I,
    L1D,
    L2,
}

#[derive(Debug, Default)]
struct HartCountersInner {
    l1i: LevelCounters,
    l1d: LevelCounters,
    l2: LevelCounters,
    walks: AtomicU64,
    faults: [AtomicU64; 5],
    fences: [AtomicU64; 4],
    categories: [AtomicU64; 4],
    l0_invalidations: AtomicU64,
    retired_instructions: AtomicU64,
    retired_memory_accesses: AtomicU64,
}

/// Counters owned by one hart.
#[derive(Debug, Default)]
pub struct HartCounters(CachePadded<HartCountersInner>);

impl HartCounters {
    pub fn level(&self, level: Level) -> &LevelCounters {
        match level {
            Level::L1I => &self.0.l1i,
            Level::L1D => &self.0.l1d,
            Level::L2 => &self.0.l2,
        }
    }

    pub fn add_walk(&self) {
        self.0.walks.fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_fault(&self, kind: FaultKind) {
        self.0.faults[kind.index()].fetch_add(1, Ordering::Relaxed);
    }

    pub fn add_fence(&self, shape: FenceShape, category: Option<FlushCategory>) {
        self.0.fences[shape.index()].fetch_add(1, Ordering::Relaxed);
        if let Some(c) = category {
            self.0.categories[c.index()].fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn add_l0_invalidations(&self, n: u64) {
        self.0.l0_invalidations.fetch_add(n, Ordering::Relaxed);
    }

    pub fn retire(&self, instructions: u64, memory_accesses: u64) {
        self.0.retired_instructions.fetch_add(instructions, Ordering::Relaxed);
        self.0.retired_memory_accesses.fetch_add(memory_accesses, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> HartSnapshot {
        let load = |c: &AtomicU64| c.load(Ordering::Relaxed);
        let faults = &self.0.faults;
        let fences = &self.0.fences;
        let cats = &self.0.categories;
        HartSnapshot {
            l1i: self.0.l1i.snapshot(),
            l1d: self.0.l1d.snapshot(),
            l2: self.0.l2.snapshot(),
            walks: load(&self.0.walks),
            faults: FaultCounts {
                invalid_entry: load(&faults[0]),
                permission_denied: load(&faults[1]),
                misaligned_superpage: load(&faults[2]),
                ad_required: load(&faults[3]),
                non_canonical: load(&faults[4]),
            },
            fences: FenceCounts {
                full: load(&fences[0]),
                vaddr: load(&fences[1]),
                asid: load(&fences[2]),
                vaddr_asid: load(&fences[3]),
            },
            fence_categories: CategoryCounts {
                never_accessed: load(&cats[0]),
                previously_invalid: load(&cats[1]),
                previously_nonwritable: load(&cats[2]),
                necessary: load(&cats[3]),
            },
            l0_invalidations: load(&self.0.l0_invalidations),
            retired_instructions: load(&self.0.retired_instructions),
            retired_memory_accesses: load(&self.0.retired_memory_accesses),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelSnapshot {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    pub flushed_entries: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultCounts {
    pub invalid_entry: u64,
    pub permission_denied: u64,
    pub misaligned_superpage: u64,
    pub ad_required: u64,
    pub non_canonical: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FenceCounts {
    pub full: u64,
    pub vaddr: u64,
    pub asid: u64,
    pub vaddr_asid: u64,
}

impl FenceCounts {
    pub fn targeted(&self) -> u64 {
        self.vaddr + self.vaddr_asid
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub never_accessed: u64,
    pub previously_invalid: u64,
    pub previously_nonwritable: u64,
    pub necessary: u64,
}

impl CategoryCounts {
    pub fn total(&self) -> u64 {
        self.never_accessed + self.previously_invalid + self.previously_nonwritable + self.necessary
    }

    pub fn get(&self, category: FlushCategory) -> u64 {
        match category {
            FlushCategory::NeverAccessed => self.never_accessed,
            FlushCategory::PreviouslyInvalid => self.previously_invalid,
            FlushCategory::PreviouslyNonWritable => self.previously_nonwritable,
            FlushCategory::Necessary => self.necessary,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HartSnapshot {
    pub l1i: LevelSnapshot,
    pub l1d: LevelSnapshot,
    pub l2: LevelSnapshot,
    pub walks: u64,
    pub faults: FaultCounts,
    pub fences: FenceCounts,
    pub fence_categories: CategoryCounts,
    pub l0_invalidations: u64,
    pub retired_instructions: u64,
    pub retired_memory_accesses: u64,
}

macro_rules! add_fields {
    ($acc:expr, $x:expr; $($f:ident),*) => { $( $acc.$f += $x.$f; )* };
}

impl HartSnapshot {
    fn accumulate(&mut self, other: &HartSnapshot) {
        for (a, b) in [(&mut self.l1i, &other.l1i), (&mut self.l1d, &other.l1d), (&mut self.l2, &other.l2)] {
            add_fields!(a, b; lookups, hits, misses, evictions, flushed_entries);
        }
        add_fields!(self.faults, other.faults;
            invalid_entry, permission_denied, misaligned_superpage, ad_required, non_canonical);
        add_fields!(self.fences, other.fences; full, vaddr, asid, vaddr_asid);
        add_fields!(self.fence_categories, other.fence_categories;
            never_accessed, previously_invalid, previously_nonwritable, necessary);
        add_fields!(self, other;
            walks, l0_invalidations, retired_instructions, retired_memory_accesses);
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub aggregate: HartSnapshot,
    pub harts: Vec<HartSnapshot>,
}

impl StatsSnapshot {
    pub fn from_harts(harts: Vec<HartSnapshot>) -> Self {
        let mut aggregate = HartSnapshot::default();
        for h in &harts {
            aggregate.accumulate(h);
        }
        StatsSnapshot { aggregate, harts }
    }

    pub fn metrics(&self) -> DerivedMetrics {
        derive_metrics(self)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DerivedMetrics {
    /// D-TLB misses per retired memory access. `None` when nothing retired.
    pub l1_miss_rate: Option<f64>,
    /// L2 misses per L2 lookup. `None` without L2 lookups.
    pub l2_local_miss_rate: Option<f64>,
    /// Memory accesses served without a D-TLB miss, including those that
    /// never left the ISA simulator's fast path.
    pub effective_l1_hits: u64,
    /// L1 (I + D) misses per thousand retired instructions.
    pub mpki: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den != 0).then(|| num as f64 / den as f64)
}

pub fn derive_metrics(s: &StatsSnapshot) -> DerivedMetrics {
    let a = &s.aggregate;
    let l1_misses = a.l1i.misses + a.l1d.misses;
    DerivedMetrics {
        l1_miss_rate: ratio(a.l1d.misses, a.retired_memory_accesses),
        l2_local_miss_rate: ratio(a.l2.misses, a.l2.lookups),
        effective_l1_hits: a.retired_memory_accesses.saturating_sub(a.l1d.misses),
        mpki: ratio(1000 * l1_misses, a.retired_instructions),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_miss_rate_arithmetic() {
        let h = HartSnapshot {
            retired_memory_accesses: 1000,
            retired_instructions: 4000,
            l1d: LevelSnapshot { misses: 10, ..Default::default() },
            ..Default::default()
        };
        let m = derive_metrics(&StatsSnapshot::from_harts(vec![h]));
        assert_eq!(m.l1_miss_rate, Some(0.01));
        assert_eq!(m.effective_l1_hits, 990);
        assert_eq!(m.mpki, Some(2.5));
        assert_eq!(m.l2_local_miss_rate, None);
    }

    #[test]
    fn empty_snapshot_is_undefined_not_nan() {
        let m = derive_metrics(&StatsSnapshot::default());
        assert_eq!(m.l1_miss_rate, None);
        assert_eq!(m.mpki, None);
        assert_eq!(m.effective_l1_hits, 0);
        let json = serde_json::to_string(&m).unwrap();
        assert!(json.contains("\"l2_local_miss_rate\":null"));
    }

    #[test]
    fn aggregate_sums_harts() {
        let a = HartCounters::default();
        let b = HartCounters::default();
        a.level(Level::L1D).record_lookup(true);
        b.level(Level::L1D).record_lookup(false);
        b.add_fault(FaultKind::AdRequired);
        a.retire(3, 1);
        let s = StatsSnapshot::from_harts(vec![a.snapshot(), b.snapshot()]);
        assert_eq!(s.aggregate.l1d.lookups, 2);
        assert_eq!(s.aggregate.l1d.hits + s.aggregate.l1d.misses, 2);
        assert_eq!(s.aggregate.faults.ad_required, 1);
        assert_eq!(s.aggregate.retired_instructions, 3);
    }
}
