//! RISC-V virtual-memory vocabulary: paging modes, SATP, PTEs and address slicing.

use bitflags::bitflags;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const PAGE_SHIFT: u32 = 12;
pub const PAGE_SIZE: u64 = 1 << PAGE_SHIFT;

/// Largest PPN representable in a PTE or SATP (44 bits).
pub const PPN_MASK: u64 = (1 << 44) - 1;

/// Physical addresses are 56 bits wide; Sv32's 34-bit space embeds into this.
pub const PADDR_BITS: u32 = 56;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PagingMode {
    Bare,
    Sv32,
    Sv39,
    Sv48,
}

impl PagingMode {
    /// Number of page-table levels. Zero for `Bare`.
    pub const fn levels(self) -> u32 {
        match self {
            PagingMode::Bare => 0,
            PagingMode::Sv32 => 2,
            PagingMode::Sv39 => 3,
            PagingMode::Sv48 => 4,
        }
    }

    pub const fn asid_bits(self) -> u32 {
        match self {
            PagingMode::Sv32 => 9,
            _ => 16,
        }
    }

    pub const fn asid_mask(self) -> u16 {
        ((1u32 << self.asid_bits()) - 1) as u16
    }

    /// Bits of VPN consumed per level.
    pub const fn index_bits(self) -> u32 {
        match self {
            PagingMode::Sv32 => 10,
            _ => 9,
        }
    }

    pub const fn va_bits(self) -> u32 {
        match self {
            PagingMode::Bare => 64,
            PagingMode::Sv32 => 32,
            PagingMode::Sv39 => 39,
            PagingMode::Sv48 => 48,
        }
    }

    pub const fn pte_size(self) -> u64 {
        match self {
            PagingMode::Sv32 => 4,
            _ => 8,
        }
    }

    /// MODE field encoding. Sv32 uses its RV32 value (1) inside the 64-bit layout.
    pub const fn encoding(self) -> u64 {
        match self {
            PagingMode::Bare => 0,
            PagingMode::Sv32 => 1,
            PagingMode::Sv39 => 8,
            PagingMode::Sv48 => 9,
        }
    }

    pub fn from_encoding(value: u64) -> Option<Self> {
        match value {
            0 => Some(PagingMode::Bare),
            1 => Some(PagingMode::Sv32),
            8 => Some(PagingMode::Sv39),
            9 => Some(PagingMode::Sv48),
            _ => None,
        }
    }
}

/// Supervisor Address Translation and Protection register.
///
/// Packed as MODE[63:60] | ASID[59:44] | PPN[43:0]. Writing the whole register
/// is the only way to change any field, so mode, ASID and root always change
/// together.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Satp {
    mode: PagingMode,
    asid: u16,
    root_ppn: u64,
}

impl Satp {
    /// Builds a SATP value. `asid` is truncated to the mode's ASID width and
    /// `root_ppn` to 44 bits.
    pub fn new(mode: PagingMode, asid: u32, root_ppn: u64) -> Self {
        Satp { mode, asid: (asid & mode.asid_mask() as u32) as u16, root_ppn: root_ppn & PPN_MASK }
    }

    pub const fn bare() -> Self {
        Satp { mode: PagingMode::Bare, asid: 0, root_ppn: 0 }
    }

    pub fn mode(&self) -> PagingMode {
        self.mode
    }

    pub fn asid(&self) -> u16 {
        self.asid
    }

    pub fn root_ppn(&self) -> u64 {
        self.root_ppn
    }

    pub fn root_addr(&self) -> u64 {
        self.root_ppn << PAGE_SHIFT
    }

    pub fn to_raw(&self) -> u64 {
        (self.mode.encoding() << 60) | ((self.asid as u64) << 44) | self.root_ppn
    }

    /// Decodes a raw register value. Unknown MODE encodings yield `None`.
    pub fn from_raw(raw: u64) -> Option<Self> {
        let mode = PagingMode::from_encoding(raw >> 60)?;
        Some(Satp::new(mode, ((raw >> 44) & 0xffff) as u32, raw & PPN_MASK))
    }
}

impl Default for Satp {
    fn default() -> Self {
        Satp::bare()
    }
}

bitflags! {
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
    pub struct PteFlags: u64 {
        const V = 1 << 0;
        const R = 1 << 1;
        const W = 1 << 2;
        const X = 1 << 3;
        const U = 1 << 4;
        const G = 1 << 5;
        const A = 1 << 6;
        const D = 1 << 7;
    }
}

impl PteFlags {
    pub const RWX: PteFlags = PteFlags::R.union(PteFlags::W).union(PteFlags::X);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct PageTableEntry {
    raw: u64,
}

impl PageTableEntry {
    pub const fn from_raw(raw: u64) -> Self {
        PageTableEntry { raw }
    }

    /// Encodes `flags` and `ppn` (truncated to 44 bits). RSW bits are zero.
    pub fn new(flags: PteFlags, ppn: u64) -> Self {
        PageTableEntry { raw: ((ppn & PPN_MASK) << 10) | flags.bits() }
    }

    pub const fn raw(&self) -> u64 {
        self.raw
    }

    pub fn flags(&self) -> PteFlags {
        PteFlags::from_bits_truncate(self.raw & 0xff)
    }

    pub const fn ppn(&self) -> u64 {
        (self.raw >> 10) & PPN_MASK
    }

    pub fn is_valid(&self) -> bool {
        self.flags().contains(PteFlags::V)
    }

    /// A PTE with any of R/W/X set is a leaf.
    pub fn is_leaf(&self) -> bool {
        self.flags().intersects(PteFlags::RWX)
    }

    /// W without R is a reserved encoding.
    pub fn is_reserved(&self) -> bool {
        let f = self.flags();
        f.contains(PteFlags::W) && !f.contains(PteFlags::R)
    }

    /// Valid and not reserved.
    pub fn is_usable(&self) -> bool {
        self.is_valid() && !self.is_reserved()
    }

    pub fn is_global(&self) -> bool {
        self.flags().contains(PteFlags::G)
    }

    /// R/W/X permissions of a usable entry; empty for invalid or reserved ones.
    pub fn permissions(&self) -> PteFlags {
        if self.is_usable() {
            self.flags() & PteFlags::RWX
        } else {
            PteFlags::empty()
        }
    }

    pub fn permits(&self, access: AccessType) -> bool {
        self.flags().contains(access.required_permission())
    }

    pub fn with_flags(&self, flags: PteFlags) -> Self {
        PageTableEntry { raw: self.raw | flags.bits() }
    }
}

/// Decodes a raw 64-bit PTE word. Reserved encodings are represented, not rejected.
pub fn decode_pte(raw: u64) -> PageTableEntry {
    PageTableEntry::from_raw(raw)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AccessType {
    Fetch,
    Load,
    Store,
}

impl AccessType {
    pub fn required_permission(self) -> PteFlags {
        match self {
            AccessType::Fetch => PteFlags::X,
            AccessType::Load => PteFlags::R,
            AccessType::Store => PteFlags::W,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("virtual address {vaddr:#x} is not canonical for {mode:?}")]
    NonCanonical { vaddr: u64, mode: PagingMode },
    #[error("bare mode has no page-table structure")]
    BareMode,
}

/// A virtual address sliced into per-level table indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VpnParts {
    mode: PagingMode,
    /// Indices ordered root-first; only the first `mode.levels()` are meaningful.
    parts: [u64; 4],
    pub offset: u64,
    pub full_vpn: u64,
}

impl VpnParts {
    pub fn mode(&self) -> PagingMode {
        self.mode
    }

    /// Indices ordered root-first.
    pub fn parts(&self) -> &[u64] {
        &self.parts[..self.mode.levels() as usize]
    }

    /// Index into the table at `level` (0 is the leaf-most level).
    pub fn index_at(&self, level: u32) -> u64 {
        let levels = self.mode.levels();
        self.parts[(levels - 1 - level) as usize]
    }

    /// Reassembles the canonical virtual address.
    pub fn join(&self) -> u64 {
        let bits = self.mode.index_bits();
        let vpn = self.parts().iter().fold(0u64, |acc, &p| (acc << bits) | p);
        let vaddr = (vpn << PAGE_SHIFT) | self.offset;
        sign_extend(vaddr, self.mode)
    }
}

fn sign_extend(vaddr: u64, mode: PagingMode) -> u64 {
    match mode {
        PagingMode::Sv39 | PagingMode::Sv48 => {
            let shift = 64 - mode.va_bits();
            (((vaddr << shift) as i64) >> shift) as u64
        }
        _ => vaddr,
    }
}

/// Checks that `vaddr` is representable in `mode`'s virtual address space.
pub fn is_canonical(vaddr: u64, mode: PagingMode) -> bool {
    match mode {
        PagingMode::Bare => true,
        PagingMode::Sv32 => vaddr >> 32 == 0,
        PagingMode::Sv39 | PagingMode::Sv48 => sign_extend(vaddr, mode) == vaddr,
    }
}

/// VPN of `vaddr`, masked to the mode's VA width.
pub fn vpn_of(vaddr: u64, mode: PagingMode) -> u64 {
    let va_bits = mode.va_bits().min(64);
    if va_bits >= 64 {
        vaddr >> PAGE_SHIFT
    } else {
        (vaddr & ((1u64 << va_bits) - 1)) >> PAGE_SHIFT
    }
}

pub fn split_vaddr(vaddr: u64, mode: PagingMode) -> Result<VpnParts, AddressError> {
    if mode == PagingMode::Bare {
        return Err(AddressError::BareMode);
    }
    if !is_canonical(vaddr, mode) {
        return Err(AddressError::NonCanonical { vaddr, mode });
    }
    let full_vpn = vpn_of(vaddr, mode);
    let bits = mode.index_bits();
    let levels = mode.levels();
    let mut parts = [0u64; 4];
    for level in 0..levels {
        parts[(levels - 1 - level) as usize] = (full_vpn >> (bits * level)) & ((1 << bits) - 1);
    }
    Ok(VpnParts { mode, parts, offset: vaddr & (PAGE_SIZE - 1), full_vpn })
}
