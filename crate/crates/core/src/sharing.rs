//! Cross-hart translation sharing: the MASI CSR and the sharing look-up table.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tlb::{raw_asid, LookupKey, TagMatcher, TlbEntry};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MasiError {
    #[error("MASI writable mask {0:#x} is not contiguous from bit 0")]
    NonContiguousMask(u64),
}

/// Machine Address Space Isolation CSR with write-any-read-legal semantics.
///
/// Writable bits are implemented from bit 0 upward; every other bit reads
/// as its hardwired constant.
#[derive(Debug)]
pub struct MasiCsr {
    value: AtomicU64,
    writable_mask: u64,
    hardwired: u64,
}

impl MasiCsr {
    /// `hardwired` supplies the constant for non-writable bits; bits inside
    /// `writable_mask` are ignored. The CSR resets to the hardwired value.
    pub fn new(writable_mask: u64, hardwired: u64) -> Result<Self, MasiError> {
        if writable_mask & writable_mask.wrapping_add(1) != 0 {
            return Err(MasiError::NonContiguousMask(writable_mask));
        }
        let hardwired = hardwired & !writable_mask;
        Ok(MasiCsr { value: AtomicU64::new(hardwired), writable_mask, hardwired })
    }

    /// Hardwired to zero: one global ASID space.
    pub fn zero() -> Self {
        MasiCsr::new(0, 0).unwrap()
    }

    pub fn writable_mask(&self) -> u64 {
        self.writable_mask
    }

    /// Effective hardwired constant (already masked to non-writable bits).
    pub fn hardwired(&self) -> u64 {
        self.hardwired
    }

    pub fn read(&self) -> u64 {
        self.value.load(Ordering::Acquire)
    }

    pub fn write(&self, value: u64) {
        self.value.store((value & self.writable_mask) | self.hardwired, Ordering::Release);
    }
}

impl Clone for MasiCsr {
    fn clone(&self) -> Self {
        MasiCsr { value: AtomicU64::new(self.read()), writable_mask: self.writable_mask, hardwired: self.hardwired }
    }
}

/// Discovers the writable MASI bits the way software would: write all
/// zeroes and read back, write all ones and read back, XOR the two reads.
/// The original value is written back afterwards.
pub fn probe_masi_writable(masi: &MasiCsr) -> u64 {
    let saved = masi.read();
    masi.write(0);
    let zeros = masi.read();
    masi.write(!0);
    let ones = masi.read();
    masi.write(saved);
    zeros ^ ones
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingDecision {
    Share,
    NoShare,
    ImplementationDefined,
}

/// Tags of a cached translation relevant to sharing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EntryTags {
    pub masi: u64,
    pub vmid: u16,
    pub asid: u16,
    pub global: bool,
}

/// Tags of the hart asking to use a translation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RequesterTags {
    pub masi: u64,
    pub vmid: u16,
    pub asid: u16,
}

/// Whether a translation cached for `entry` may serve `requester` on another hart.
pub fn sharing_decision(entry: EntryTags, requester: RequesterTags) -> SharingDecision {
    use SharingDecision::*;
    if entry.masi != requester.masi || entry.vmid != requester.vmid {
        return NoShare;
    }
    if entry.global {
        return Share;
    }
    match (entry.asid, requester.asid) {
        (0, 0) => NoShare,
        (0, _) | (_, 0) => ImplementationDefined,
        (a, b) if a == b => Share,
        _ => NoShare,
    }
}

/// Resolution of [`SharingDecision::ImplementationDefined`] for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImplDefinedPolicy {
    Share,
    #[default]
    NoShare,
}

/// Matcher for structures shared across harts under a global ASID space.
///
/// Entries whose ASID tag equals the requester's (including a hart's own
/// synthetic ASID-0 tag) always match; anything else goes through the
/// sharing table.
#[derive(Debug, Clone, Copy)]
pub struct GlobalAsidMatcher {
    pub impl_defined: ImplDefinedPolicy,
}

impl TagMatcher for GlobalAsidMatcher {
    fn admits(&self, entry: &TlbEntry, key: &LookupKey) -> bool {
        if entry.hart_tag != key.hart_tag {
            return false;
        }
        if entry.asid == key.asid && entry.masi_tag == key.masi_tag && entry.vmid == key.vmid {
            return true;
        }
        let decision = sharing_decision(
            EntryTags { masi: entry.masi_tag, vmid: entry.vmid, asid: entry.raw_asid(), global: entry.global },
            RequesterTags { masi: key.masi_tag, vmid: key.vmid, asid: raw_asid(key.asid) },
        );
        match decision {
            SharingDecision::Share => true,
            SharingDecision::NoShare => false,
            SharingDecision::ImplementationDefined => self.impl_defined == ImplDefinedPolicy::Share,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(masi: u64, vmid: u16, asid: u16, global: bool) -> EntryTags {
        EntryTags { masi, vmid, asid, global }
    }

    fn r(masi: u64, vmid: u16, asid: u16) -> RequesterTags {
        RequesterTags { masi, vmid, asid }
    }

    #[test]
    fn table_examples() {
        assert_eq!(sharing_decision(e(1, 0, 3, false), r(2, 0, 3)), SharingDecision::NoShare);
        assert_eq!(sharing_decision(e(1, 0, 3, false), r(1, 0, 3)), SharingDecision::Share);
        assert_eq!(sharing_decision(e(1, 0, 0, false), r(1, 0, 0)), SharingDecision::NoShare);
        assert_eq!(sharing_decision(e(1, 0, 0, false), r(1, 0, 5)), SharingDecision::ImplementationDefined);
        assert_eq!(sharing_decision(e(1, 0, 3, true), r(1, 0, 9)), SharingDecision::Share);
        assert_eq!(sharing_decision(e(1, 1, 3, true), r(1, 2, 3)), SharingDecision::NoShare);
        assert_eq!(sharing_decision(e(1, 0, 3, false), r(1, 0, 4)), SharingDecision::NoShare);
    }

    #[test]
    fn masi_warl() {
        let m = MasiCsr::new(0xff, 0).unwrap();
        m.write(0x1234);
        assert_eq!(m.read(), 0x34);
        assert_eq!(probe_masi_writable(&m), 0xff);
        assert_eq!(m.read(), 0x34);
    }

    #[test]
    fn hardwired_masi_probes_zero() {
        let m = MasiCsr::zero();
        assert_eq!(probe_masi_writable(&m), 0);

        let m = MasiCsr::new(0, 5).unwrap();
        m.write(!0);
        assert_eq!(m.read(), 5);
        assert_eq!(probe_masi_writable(&m), 0);
    }

    #[test]
    fn mask_must_be_contiguous_from_bit_zero() {
        assert!(MasiCsr::new(0b110, 0).is_err());
        assert!(MasiCsr::new(0b111, 0).is_ok());
        assert!(MasiCsr::new(u64::MAX, 0).is_ok());
    }
}
