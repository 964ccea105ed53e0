//! Sparse simulated physical memory holding page tables.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::types::{PAGE_SHIFT, PAGE_SIZE};

type Page = Mutex<Box<[u8; PAGE_SIZE as usize]>>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum MemoryError {
    #[error("physical address {paddr:#x} is not {align}-byte aligned")]
    Misaligned { paddr: u64, align: u64 },
}

/// A page-table word write, reported to observers after it lands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PteMutation {
    pub paddr: u64,
    pub old: u64,
    pub new: u64,
}

pub trait MutationObserver: Send + Sync {
    fn on_mutation(&self, event: &PteMutation);
}

/// Page-granular sparse memory. Unallocated pages read as zero and are
/// allocated on first write. Each page carries its own lock; the page map
/// lock is only taken exclusively when a new page is allocated.
#[derive(Default)]
pub struct SparseMemory {
    pages: RwLock<HashMap<u64, Arc<Page>>>,
    observers: RwLock<Vec<Arc<dyn MutationObserver>>>,
}

impl std::fmt::Debug for SparseMemory {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SparseMemory").field("allocated_pages", &self.allocated_pages()).finish()
    }
}

impl SparseMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn allocated_pages(&self) -> usize {
        self.pages.read().len()
    }

    pub fn add_observer(&self, observer: Arc<dyn MutationObserver>) {
        self.observers.write().push(observer);
    }

    fn page(&self, ppn: u64) -> Option<Arc<Page>> {
        self.pages.read().get(&ppn).cloned()
    }

    fn page_or_alloc(&self, ppn: u64) -> Arc<Page> {
        if let Some(page) = self.page(ppn) {
            return page;
        }
        self.pages.write().entry(ppn).or_insert_with(|| Arc::new(Mutex::new(Box::new([0; PAGE_SIZE as usize])))).clone()
    }

    fn check_align(paddr: u64, align: u64) -> Result<(), MemoryError> {
        if !paddr.is_multiple_of(align) {
            Err(MemoryError::Misaligned { paddr, align })
        } else {
            Ok(())
        }
    }

    pub fn read_u64(&self, paddr: u64) -> Result<u64, MemoryError> {
        Self::check_align(paddr, 8)?;
        let off = (paddr & (PAGE_SIZE - 1)) as usize;
        Ok(match self.page(paddr >> PAGE_SHIFT) {
            Some(page) => u64::from_le_bytes(page.lock()[off..off + 8].try_into().unwrap()),
            None => 0,
        })
    }

    pub fn read_u32(&self, paddr: u64) -> Result<u32, MemoryError> {
        Self::check_align(paddr, 4)?;
        let off = (paddr & (PAGE_SIZE - 1)) as usize;
        Ok(match self.page(paddr >> PAGE_SHIFT) {
            Some(page) => u32::from_le_bytes(page.lock()[off..off + 4].try_into().unwrap()),
            None => 0,
        })
    }

    /// Stores a word without notifying observers. Returns the previous value.
    pub fn write_u64(&self, paddr: u64, value: u64) -> Result<u64, MemoryError> {
        Self::check_align(paddr, 8)?;
        let off = (paddr & (PAGE_SIZE - 1)) as usize;
        let page = self.page_or_alloc(paddr >> PAGE_SHIFT);
        let mut page = page.lock();
        let old = u64::from_le_bytes(page[off..off + 8].try_into().unwrap());
        page[off..off + 8].copy_from_slice(&value.to_le_bytes());
        Ok(old)
    }

    pub fn write_u32(&self, paddr: u64, value: u32) -> Result<u32, MemoryError> {
        Self::check_align(paddr, 4)?;
        let off = (paddr & (PAGE_SIZE - 1)) as usize;
        let page = self.page_or_alloc(paddr >> PAGE_SHIFT);
        let mut page = page.lock();
        let old = u32::from_le_bytes(page[off..off + 4].try_into().unwrap());
        page[off..off + 4].copy_from_slice(&value.to_le_bytes());
        Ok(old)
    }

    /// Sets bits in a word in place, holding the page lock across the
    /// read-modify-write. Returns the new value.
    pub fn fetch_or_u64(&self, paddr: u64, bits: u64) -> Result<u64, MemoryError> {
        Self::check_align(paddr, 8)?;
        let off = (paddr & (PAGE_SIZE - 1)) as usize;
        let page = self.page_or_alloc(paddr >> PAGE_SHIFT);
        let mut page = page.lock();
        let new = u64::from_le_bytes(page[off..off + 8].try_into().unwrap()) | bits;
        page[off..off + 8].copy_from_slice(&new.to_le_bytes());
        Ok(new)
    }

    pub fn fetch_or_u32(&self, paddr: u64, bits: u32) -> Result<u32, MemoryError> {
        Self::check_align(paddr, 4)?;
        let off = (paddr & (PAGE_SIZE - 1)) as usize;
        let page = self.page_or_alloc(paddr >> PAGE_SHIFT);
        let mut page = page.lock();
        let new = u32::from_le_bytes(page[off..off + 4].try_into().unwrap()) | bits;
        page[off..off + 4].copy_from_slice(&new.to_le_bytes());
        Ok(new)
    }

    pub(crate) fn notify(&self, event: &PteMutation) {
        let observers = self.observers.read().clone();
        for observer in observers {
            observer.on_mutation(event);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unallocated_reads_zero_without_allocating() {
        let mem = SparseMemory::new();
        assert_eq!(mem.read_u64(0x8000_0000).unwrap(), 0);
        assert_eq!(mem.allocated_pages(), 0);
    }

    #[test]
    fn write_allocates_and_returns_previous() {
        let mem = SparseMemory::new();
        assert_eq!(mem.write_u64(0x1008, 42).unwrap(), 0);
        assert_eq!(mem.write_u64(0x1008, 7).unwrap(), 42);
        assert_eq!(mem.read_u64(0x1008).unwrap(), 7);
        assert_eq!(mem.read_u32(0x1008).unwrap(), 7);
        assert_eq!(mem.allocated_pages(), 1);
    }

    #[test]
    fn misaligned_access_rejected() {
        let mem = SparseMemory::new();
        assert_eq!(mem.read_u64(0x1004), Err(MemoryError::Misaligned { paddr: 0x1004, align: 8 }));
        assert!(mem.write_u32(0x1002, 1).is_err());
    }

    #[test]
    fn fetch_or_sets_bits() {
        let mem = SparseMemory::new();
        mem.write_u64(0x2000, 0x1).unwrap();
        assert_eq!(mem.fetch_or_u64(0x2000, 0x40).unwrap(), 0x41);
        assert_eq!(mem.read_u64(0x2000).unwrap(), 0x41);
    }
}
