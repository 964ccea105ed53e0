use std::sync::Arc;

use proptest::prelude::*;
use tlbsim::sharing::{probe_masi_writable, MasiCsr};
use tlbsim::tlb::{level_base, set_index, FlushFilter, ReplacementPolicy, Tlb, TlbEntry, TlbGeometry};
use tlbsim::workload::{AddressSpace, FrameAllocator};
use tlbsim::{AccessType, FenceOp, PageTableEntry, PagingMode, PteFlags, SparseMemory, System, SystemConfig, Topology};

fn entry(vpn: u64, level: u32, asid: u32, global: bool, hart: u16) -> TlbEntry {
    TlbEntry {
        vpn: level_base(vpn, level),
        level,
        pte: PageTableEntry::new(PteFlags::V | PteFlags::R, 1),
        asid,
        global,
        hart_tag: Some(hart),
        masi_tag: 0,
        vmid: 0,
        negative: false,
        origin_hart: hart,
        pte_addr: 0,
    }
}

fn entry_strategy() -> impl Strategy<Value = TlbEntry> {
    (0u64..4096, 0u32..3, 1u32..4, any::<bool>(), 0u16..2).prop_map(|(v, l, a, g, h)| entry(v, l, a, g, h))
}

proptest! {
    #[test]
    fn flush_removes_exactly_the_matching_entries(
        entries in proptest::collection::vec(entry_strategy(), 0..64),
        vpn in proptest::option::of(0u64..4096),
        asid in proptest::option::of(1u32..4),
        hart in proptest::option::of(0u16..2),
    ) {
        let tlb = Tlb::new(TlbGeometry::fully_associative(64)).unwrap();
        for e in &entries {
            tlb.insert(*e);
        }
        let before = tlb.entries();
        let filter = FlushFilter { vpn, asid, hart_tag: hart, masi_tag: None };
        let expected: Vec<_> = before.iter().filter(|e| {
            vpn.is_none_or(|v| level_base(v, e.level) == e.vpn)
                && asid.is_none_or(|a| !e.global && e.asid == a)
                && hart.is_none_or(|h| e.hart_tag == Some(h))
        }).collect();
        let removed = tlb.flush(&filter);
        prop_assert_eq!(removed, expected.len());
        prop_assert_eq!(tlb.len(), before.len() - expected.len());
    }

    #[test]
    fn occupancy_never_exceeds_capacity(
        entries in proptest::collection::vec(entry_strategy(), 0..200),
        ways in prop::sample::select(vec![1usize, 2, 4, 8]),
        seed: u64,
    ) {
        let geometry = TlbGeometry::set_associative(32, ways).with_policy(ReplacementPolicy::Random { seed });
        let tlb = Tlb::new(geometry).unwrap();
        for e in &entries {
            tlb.insert(*e);
        }
        prop_assert!(tlb.len() <= 32);
        for set in 0..geometry.sets() {
            prop_assert!(tlb.set_contents(set).len() <= ways);
        }
    }

    #[test]
    fn set_index_is_in_range(vpn: u64, level in 0u32..4, ways in prop::sample::select(vec![1usize, 2, 4])) {
        let g = TlbGeometry::set_associative(64, ways);
        let i = set_index(&g, vpn, level);
        prop_assert!(i < g.sets());
        prop_assert_eq!(i, ((vpn >> (9 * level)) % g.sets() as u64) as usize);
    }

    #[test]
    fn masi_reads_are_legal(bits in 0u32..16, hardwired: u64, writes in proptest::collection::vec(any::<u64>(), 1..8)) {
        let mask = (1u64 << bits) - 1;
        let csr = MasiCsr::new(mask, hardwired).unwrap();
        prop_assert_eq!(probe_masi_writable(&csr), mask);
        for w in writes {
            csr.write(w);
            prop_assert_eq!(csr.read(), (w & mask) | (hardwired & !mask));
        }
    }

    #[test]
    fn l1_lookups_equal_accesses(ops in proptest::collection::vec((0u16..2, 0u64..48, 0u8..3, 0u8..20), 1..300)) {
        let mem = Arc::new(SparseMemory::new());
        let mut alloc = FrameAllocator::default();
        let space = AddressSpace::new(PagingMode::Sv39, &mut alloc);
        for i in 0..32 {
            let ppn = alloc.data(0);
            space.map(&mem, &mut alloc, 0x4000_0000 + i * 4096, ppn, PteFlags::R | PteFlags::W | PteFlags::X, 0);
        }
        let cfg = SystemConfig {
            harts: 2,
            topology: Topology::from_name("shared_global_asid", 16, 2).unwrap(),
            ..Default::default()
        };
        let sys = System::new(cfg, mem).unwrap();
        for h in 0..2 {
            sys.write_satp(h, space.satp(1)).unwrap();
        }
        let mut accesses = 0;
        for (hart, page, kind, fence) in ops {
            if fence == 0 {
                sys.sfence(FenceOp::vaddr(hart, 0x4000_0000 + page * 4096)).unwrap();
                continue;
            }
            let access = [AccessType::Fetch, AccessType::Load, AccessType::Store][kind as usize];
            let _ = sys.translate(hart, 0x4000_0000 + page * 4096, access);
            accesses += 1;
        }
        let a = sys.snapshot().aggregate;
        prop_assert_eq!(a.l1i.lookups + a.l1d.lookups, accesses);
        prop_assert_eq!(a.l1d.hits + a.l1d.misses, a.l1d.lookups);
        prop_assert_eq!(a.l2.lookups, a.l1i.misses + a.l1d.misses);
    }
}
