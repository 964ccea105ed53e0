//! TLB organisations: set associative (covering direct mapped and fully
//! associative) with FIFO or seeded random replacement, and an unbounded
//! ideal TLB.
//!
//! Recency is never tracked. The simulator only observes lookups that miss
//! the ISA simulator's own fast-path TLB, so LRU cannot be modelled
//! faithfully; FIFO and random need only fills.
//!
//! Victim caches, prefetchers and coalescing would slot in behind [`Tlb::insert`]
//! (victims are already reported there) and are not implemented.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, AtomicU8, Ordering};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{AccessType, PageTableEntry};

/// VPN bits covered per page-table level inside TLB structures.
pub const LEVEL_BITS: u32 = 9;
pub const MAX_LEVELS: u32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ReplacementPolicy {
    Fifo,
    Random { seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TlbGeometry {
    pub entries: usize,
    pub ways: usize,
    pub policy: ReplacementPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GeometryError {
    #[error("TLB must have at least one entry and one way (entries={entries}, ways={ways})")]
    Empty { entries: usize, ways: usize },
    #[error("{entries} entries are not divisible by {ways} ways")]
    NotDivisible { entries: usize, ways: usize },
}

impl TlbGeometry {
    pub fn fully_associative(entries: usize) -> Self {
        TlbGeometry { entries, ways: entries, policy: ReplacementPolicy::Fifo }
    }

    pub fn set_associative(entries: usize, ways: usize) -> Self {
        TlbGeometry { entries, ways, policy: ReplacementPolicy::Fifo }
    }

    pub fn direct_mapped(entries: usize) -> Self {
        TlbGeometry { entries, ways: 1, policy: ReplacementPolicy::Fifo }
    }

    pub fn with_policy(mut self, policy: ReplacementPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if self.entries == 0 || self.ways == 0 {
            return Err(GeometryError::Empty { entries: self.entries, ways: self.ways });
        }
        if !self.entries.is_multiple_of(self.ways) {
            return Err(GeometryError::NotDivisible { entries: self.entries, ways: self.ways });
        }
        Ok(())
    }

    pub fn sets(&self) -> usize {
        self.entries / self.ways
    }
}

/// Set index of a translation at `level`: the VPN bits above the page offset
/// of that level, modulo the set count.
pub fn set_index(geometry: &TlbGeometry, vpn: u64, level: u32) -> usize {
    ((vpn >> (LEVEL_BITS * level)) % geometry.sets() as u64) as usize
}

/// Base VPN of the level-`level` page containing `vpn`.
pub fn level_base(vpn: u64, level: u32) -> u64 {
    vpn & !((1u64 << (LEVEL_BITS * level)) - 1)
}

/// Reserved ASID tag range for hart-unique stand-ins of ASID 0.
pub const SYNTHETIC_ASID_BASE: u32 = 1 << 16;

/// A cached translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TlbEntry {
    /// Base VPN; the low `9 * level` bits are zero.
    pub vpn: u64,
    pub level: u32,
    pub pte: PageTableEntry,
    /// ASID tag. Values at or above [`SYNTHETIC_ASID_BASE`] stand in for a
    /// hart's ASID 0 in globally shared structures.
    pub asid: u32,
    pub global: bool,
    pub hart_tag: Option<u16>,
    pub masi_tag: u64,
    pub vmid: u16,
    /// Caches an invalid translation.
    pub negative: bool,
    /// Hart whose walk produced the entry. Bookkeeping only, never matched.
    pub origin_hart: u16,
    /// Physical address of the leaf PTE.
    pub pte_addr: u64,
}

impl TlbEntry {
    pub fn covers(&self, vpn: u64) -> bool {
        level_base(vpn, self.level) == self.vpn
    }

    /// ASID with any synthetic stand-in mapped back to 0.
    pub fn raw_asid(&self) -> u16 {
        raw_asid(self.asid)
    }

    /// Two entries with the same identity occupy one slot.
    pub fn same_identity(&self, other: &TlbEntry) -> bool {
        self.vpn == other.vpn
            && self.level == other.level
            && self.global == other.global
            && (self.global || self.asid == other.asid)
            && self.hart_tag == other.hart_tag
            && self.masi_tag == other.masi_tag
            && self.vmid == other.vmid
    }
}

pub fn raw_asid(tag: u32) -> u16 {
    if tag >= SYNTHETIC_ASID_BASE {
        0
    } else {
        tag as u16
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LookupKey {
    /// Full (4 KiB granular) VPN being translated.
    pub vpn: u64,
    pub asid: u32,
    pub hart_tag: Option<u16>,
    pub masi_tag: u64,
    pub vmid: u16,
    pub access: AccessType,
}

/// Decides whether a cached entry's tags admit a lookup. VPN coverage is
/// checked by the TLB before the matcher is consulted.
pub trait TagMatcher {
    fn admits(&self, entry: &TlbEntry, key: &LookupKey) -> bool;
}

/// Every tag must match exactly; global entries ignore the ASID.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactTags;

impl TagMatcher for ExactTags {
    fn admits(&self, entry: &TlbEntry, key: &LookupKey) -> bool {
        entry.hart_tag == key.hart_tag
            && entry.vmid == key.vmid
            && entry.masi_tag == key.masi_tag
            && (entry.global || entry.asid == key.asid)
    }
}

/// Selects entries to flush. Every present field must match.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlushFilter {
    /// Any entry covering this VPN, global or not.
    pub vpn: Option<u64>,
    /// Non-global entries with this ASID tag.
    pub asid: Option<u32>,
    pub hart_tag: Option<u16>,
    pub masi_tag: Option<u64>,
}

impl FlushFilter {
    pub fn all() -> Self {
        FlushFilter::default()
    }

    pub fn matches(&self, entry: &TlbEntry) -> bool {
        if let Some(vpn) = self.vpn {
            if !entry.covers(vpn) {
                return false;
            }
        }
        if let Some(asid) = self.asid {
            if entry.global || entry.asid != asid {
                return false;
            }
        }
        if self.hart_tag.is_some() && entry.hart_tag != self.hart_tag {
            return false;
        }
        if let Some(masi) = self.masi_tag {
            if entry.masi_tag != masi {
                return false;
            }
        }
        true
    }
}

/// SplitMix64; the seeded generator behind random replacement.
#[derive(Debug, Clone, Copy)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    /// Generator for one set of a randomly replaced TLB.
    pub fn for_set(seed: u64, set: usize) -> Self {
        SplitMix64::new(seed ^ (set as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
}

#[derive(Debug, Default)]
pub struct TlbCounters {
    pub lookups: AtomicU64,
    pub hits: AtomicU64,
    pub misses: AtomicU64,
    pub inserts: AtomicU64,
    pub evictions: AtomicU64,
    pub flushed: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TlbCounterSnapshot {
    pub lookups: u64,
    pub hits: u64,
    pub misses: u64,
    pub inserts: u64,
    pub evictions: u64,
    pub flushed: u64,
}

impl TlbCounters {
    pub fn snapshot(&self) -> TlbCounterSnapshot {
        TlbCounterSnapshot {
            lookups: self.lookups.load(Ordering::Relaxed),
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            inserts: self.inserts.load(Ordering::Relaxed),
            evictions: self.evictions.load(Ordering::Relaxed),
            flushed: self.flushed.load(Ordering::Relaxed),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    entry: TlbEntry,
    /// Fill order within the set.
    seq: u64,
}

#[derive(Debug)]
struct Set {
    ways: Box<[Option<Slot>]>,
    next_seq: u64,
    rng: SplitMix64,
}

/// Outcome of [`Tlb::insert`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InsertOutcome {
    /// Stored in a free way.
    Filled,
    /// An entry with identical tags was overwritten in place.
    Replaced,
    /// The set was full; the victim is returned.
    Evicted(TlbEntry),
}

impl InsertOutcome {
    pub fn evicted(&self) -> Option<TlbEntry> {
        match self {
            InsertOutcome::Evicted(e) => Some(*e),
            _ => None,
        }
    }
}

/// A set-associative TLB. Each set has its own lock; counters are atomic.
#[derive(Debug)]
pub struct Tlb {
    geometry: TlbGeometry,
    sets: Box<[Mutex<Set>]>,
    /// Bit `l` set once a level-`l` entry has been inserted.
    levels_present: AtomicU8,
    counters: TlbCounters,
    /// Set offset per hart tag; 0 indexes on the VPN alone.
    hart_stride: usize,
}

impl Tlb {
    pub fn new(geometry: TlbGeometry) -> Result<Self, GeometryError> {
        geometry.validate()?;
        let seed = match geometry.policy {
            ReplacementPolicy::Random { seed } => seed,
            ReplacementPolicy::Fifo => 0,
        };
        let sets = (0..geometry.sets())
            .map(|i| {
                Mutex::new(Set {
                    ways: vec![None; geometry.ways].into_boxed_slice(),
                    next_seq: 0,
                    rng: SplitMix64::for_set(seed, i),
                })
            })
            .collect();
        Ok(Tlb { geometry, sets, levels_present: AtomicU8::new(0), counters: TlbCounters::default(), hart_stride: 0 })
    }

    /// Rotates the set index by `hart * sets / harts` for hart-tagged
    /// entries, so copies of one VPN held for different harts land in
    /// different sets.
    pub fn with_hart_interleave(mut self, harts: usize) -> Self {
        self.hart_stride = (self.geometry.sets() / harts.max(1)).max(1);
        self
    }

    fn index(&self, vpn: u64, level: u32, hart_tag: Option<u16>) -> usize {
        let idx = set_index(&self.geometry, vpn, level);
        match hart_tag {
            Some(h) if self.hart_stride > 0 => (idx + h as usize * self.hart_stride) % self.geometry.sets(),
            _ => idx,
        }
    }

    pub fn geometry(&self) -> &TlbGeometry {
        &self.geometry
    }

    pub fn counters(&self) -> &TlbCounters {
        &self.counters
    }

    /// Probes one set per cached page level without touching counters.
    pub fn probe<M: TagMatcher>(&self, key: &LookupKey, matcher: &M) -> Option<TlbEntry> {
        let present = self.levels_present.load(Ordering::Acquire);
        let mut probed = [usize::MAX; MAX_LEVELS as usize];
        for level in 0..MAX_LEVELS {
            if present & (1 << level) == 0 {
                continue;
            }
            let idx = self.index(level_base(key.vpn, level), level, key.hart_tag);
            if probed.contains(&idx) {
                continue;
            }
            probed[level as usize] = idx;
            let set = self.sets[idx].lock();
            let found =
                set.ways.iter().flatten().find(|slot| slot.entry.covers(key.vpn) && matcher.admits(&slot.entry, key));
            if let Some(slot) = found {
                return Some(slot.entry);
            }
        }
        None
    }

    /// Looks up a translation and counts the hit or miss. Recency is not updated.
    pub fn lookup<M: TagMatcher>(&self, key: &LookupKey, matcher: &M) -> Option<TlbEntry> {
        let found = self.probe(key, matcher);
        self.counters.lookups.fetch_add(1, Ordering::Relaxed);
        if found.is_some() {
            self.counters.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.counters.misses.fetch_add(1, Ordering::Relaxed);
        }
        found
    }

    /// Fills `entry` into its set. A tag-identical entry is overwritten in
    /// place and keeps its fill position; otherwise the lowest free way is
    /// used, or a victim chosen by the replacement policy is evicted.
    pub fn insert(&self, entry: TlbEntry) -> InsertOutcome {
        debug_assert_eq!(entry.vpn, level_base(entry.vpn, entry.level));
        self.levels_present.fetch_or(1 << entry.level, Ordering::AcqRel);
        self.counters.inserts.fetch_add(1, Ordering::Relaxed);
        let idx = self.index(entry.vpn, entry.level, entry.hart_tag);
        let mut set = self.sets[idx].lock();
        let set = &mut *set;

        if let Some(slot) = set.ways.iter_mut().flatten().find(|slot| slot.entry.same_identity(&entry)) {
            slot.entry = entry;
            return InsertOutcome::Replaced;
        }

        let seq = set.next_seq;
        set.next_seq += 1;
        if let Some(way) = set.ways.iter().position(Option::is_none) {
            set.ways[way] = Some(Slot { entry, seq });
            return InsertOutcome::Filled;
        }

        let way = match self.geometry.policy {
            ReplacementPolicy::Fifo => {
                set.ways.iter().enumerate().min_by_key(|(_, slot)| slot.map(|s| s.seq)).map(|(way, _)| way).unwrap()
            }
            ReplacementPolicy::Random { .. } => (set.rng.next_u64() % self.geometry.ways as u64) as usize,
        };
        let victim = set.ways[way].replace(Slot { entry, seq }).unwrap().entry;
        self.counters.evictions.fetch_add(1, Ordering::Relaxed);
        InsertOutcome::Evicted(victim)
    }

    /// Removes every entry matching `filter` and returns them.
    pub fn drain_matching(&self, filter: &FlushFilter) -> Vec<TlbEntry> {
        let mut removed = Vec::new();
        for set in self.sets.iter() {
            let mut set = set.lock();
            for way in set.ways.iter_mut() {
                if way.is_some_and(|slot| filter.matches(&slot.entry)) {
                    removed.push(way.take().unwrap().entry);
                }
            }
        }
        self.counters.flushed.fetch_add(removed.len() as u64, Ordering::Relaxed);
        removed
    }

    /// Removes every entry matching `filter`; returns how many were removed.
    pub fn flush(&self, filter: &FlushFilter) -> usize {
        self.drain_matching(filter).len()
    }

    pub fn len(&self) -> usize {
        self.sets.iter().map(|s| s.lock().ways.iter().flatten().count()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All live entries, set by set.
    pub fn entries(&self) -> Vec<TlbEntry> {
        self.sets
            .iter()
            .flat_map(|s| s.lock().ways.iter().flatten().map(|slot| slot.entry).collect::<Vec<_>>())
            .collect()
    }

    /// Live entries of one set in fill order, oldest first.
    pub fn set_contents(&self, set: usize) -> Vec<TlbEntry> {
        let set = self.sets[set].lock();
        let mut slots: Vec<_> = set.ways.iter().flatten().copied().collect();
        slots.sort_by_key(|s| s.seq);
        slots.into_iter().map(|s| s.entry).collect()
    }
}

/// Caches every translation it sees and never evicts.
#[derive(Debug, Default, Clone)]
pub struct IdealTlb {
    buckets: HashMap<(u32, u64), Vec<TlbEntry>>,
    len: usize,
}

impl IdealTlb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn lookup<M: TagMatcher>(&self, key: &LookupKey, matcher: &M) -> Option<&TlbEntry> {
        (0..MAX_LEVELS).find_map(|level| {
            self.buckets.get(&(level, level_base(key.vpn, level)))?.iter().find(|e| matcher.admits(e, key))
        })
    }

    /// Inserts or overwrites the tag-identical entry. Returns the replaced one.
    pub fn insert(&mut self, entry: TlbEntry) -> Option<TlbEntry> {
        let bucket = self.buckets.entry((entry.level, entry.vpn)).or_default();
        if let Some(existing) = bucket.iter_mut().find(|e| e.same_identity(&entry)) {
            return Some(std::mem::replace(existing, entry));
        }
        bucket.push(entry);
        self.len += 1;
        None
    }

    pub fn drain_matching(&mut self, filter: &FlushFilter) -> Vec<TlbEntry> {
        let mut removed = Vec::new();
        self.buckets.retain(|_, bucket| {
            bucket.retain(|e| {
                if filter.matches(e) {
                    removed.push(*e);
                    false
                } else {
                    true
                }
            });
            !bucket.is_empty()
        });
        self.len -= removed.len();
        removed
    }

    pub fn iter(&self) -> impl Iterator<Item = &TlbEntry> {
        self.buckets.values().flatten()
    }
}
