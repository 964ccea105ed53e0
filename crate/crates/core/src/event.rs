//! Events that drive a [`System`](crate::hierarchy::System), shared by the
//! workload generator, live drivers and the trace format.

use crate::fence::FenceOp;
use crate::types::{AccessType, Satp};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    /// One retired instruction on `hart`; Load/Store also retire a memory access.
    Access {
        hart: u16,
        vaddr: u64,
        access: AccessType,
    },
    Fence(FenceOp),
    SatpWrite {
        hart: u16,
        satp: Satp,
    },
    /// An OS write to a page-table word.
    PteWrite {
        paddr: u64,
        value: u64,
    },
}

impl Event {
    pub fn load(hart: u16, vaddr: u64) -> Self {
        Event::Access { hart, vaddr, access: AccessType::Load }
    }

    pub fn store(hart: u16, vaddr: u64) -> Self {
        Event::Access { hart, vaddr, access: AccessType::Store }
    }

    pub fn fetch(hart: u16, vaddr: u64) -> Self {
        Event::Access { hart, vaddr, access: AccessType::Fetch }
    }

    /// Hart that issues the event. PTE writes belong to no hart.
    pub fn hart(&self) -> Option<u16> {
        match self {
            Event::Access { hart, .. } | Event::SatpWrite { hart, .. } => Some(*hart),
            Event::Fence(op) => Some(op.hart),
            Event::PteWrite { .. } => None,
        }
    }
}
