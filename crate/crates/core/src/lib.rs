//! Multi-hart RISC-V TLB hierarchy simulator.

pub mod driver;
pub mod event;
pub mod fence;
pub mod hierarchy;
pub mod memory;
pub mod sharing;
pub mod stats;
pub mod tlb;
pub mod trace;
pub mod types;
pub mod validate;
pub mod walk;
pub mod workload;

pub use event::Event;
pub use fence::{FenceOp, FenceShape, FlushCategory};
pub use hierarchy::{System, SystemConfig, Topology, TranslateError, Translated};
pub use memory::SparseMemory;
pub use stats::StatsSnapshot;
pub use types::{AccessType, PageTableEntry, PagingMode, PteFlags, Satp};
