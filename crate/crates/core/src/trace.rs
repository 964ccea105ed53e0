//! Binary trace format, collector-side writer, reader and offline replayer.
//!
//! A file is a 16-byte header (`RVTLBT01`, u32 record count, u32 flags)
//! followed by 32-byte little-endian records:
//!
//! | bytes  | field                                              |
//! |--------|----------------------------------------------------|
//! | 0..2   | hart                                               |
//! | 2      | op                                                 |
//! | 3      | level hint                                         |
//! | 4..8   | reserved, preserved                                |
//! | 8..16  | vaddr (PTE paddr for `PteWrite`)                   |
//! | 16..24 | satp (leaf PTE paddr for memory ops, old PTE word for `PteWrite`, ASID for `Sfence`) |
//! | 24..32 | payload (leaf PTE for memory ops, new PTE word for `PteWrite`) |
//!
//! For `Sfence`, bit 0 of the level hint marks a vaddr operand and bit 1 an
//! ASID operand. A count of 0 means the writer could not seek back to fill it in.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::fence::FenceOp;
use crate::hierarchy::{LeafSource, SimError, System};
use crate::stats::StatsSnapshot;
use crate::types::{AccessType, PageTableEntry, Satp};

pub const MAGIC: &[u8; 8] = b"RVTLBT01";
pub const HEADER_SIZE: usize = 16;
pub const RECORD_SIZE: usize = 32;

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];
const FENCE_HAS_VADDR: u8 = 1;
const FENCE_HAS_ASID: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum TraceOp {
    Fetch = 0,
    Load = 1,
    Store = 2,
    Sfence = 3,
    SatpWrite = 4,
    PteWrite = 5,
}

impl TraceOp {
    pub fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            0 => TraceOp::Fetch,
            1 => TraceOp::Load,
            2 => TraceOp::Store,
            3 => TraceOp::Sfence,
            4 => TraceOp::SatpWrite,
            5 => TraceOp::PteWrite,
            _ => return None,
        })
    }

    pub fn access(self) -> Option<AccessType> {
        match self {
            TraceOp::Fetch => Some(AccessType::Fetch),
            TraceOp::Load => Some(AccessType::Load),
            TraceOp::Store => Some(AccessType::Store),
            _ => None,
        }
    }
}

impl From<AccessType> for TraceOp {
    fn from(a: AccessType) -> Self {
        match a {
            AccessType::Fetch => TraceOp::Fetch,
            AccessType::Load => TraceOp::Load,
            AccessType::Store => TraceOp::Store,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TraceRecord {
    pub hart: u16,
    pub op: TraceOp,
    pub level_hint: u8,
    pub reserved: u32,
    pub vaddr: u64,
    pub satp_raw: u64,
    pub payload: u64,
}

impl TraceRecord {
    pub fn access(hart: u16, access: AccessType, vaddr: u64, level: u32, pte_addr: u64, pte: u64) -> Self {
        TraceRecord {
            hart,
            op: access.into(),
            level_hint: level as u8,
            reserved: 0,
            vaddr,
            satp_raw: pte_addr,
            payload: pte,
        }
    }

    pub fn sfence(op: FenceOp) -> Self {
        let mut hint = 0;
        if op.vaddr.is_some() {
            hint |= FENCE_HAS_VADDR;
        }
        if op.asid.is_some() {
            hint |= FENCE_HAS_ASID;
        }
        TraceRecord {
            hart: op.hart,
            op: TraceOp::Sfence,
            level_hint: hint,
            reserved: 0,
            vaddr: op.vaddr.unwrap_or(0),
            satp_raw: op.asid.unwrap_or(0) as u64,
            payload: 0,
        }
    }

    pub fn satp_write(hart: u16, satp: u64) -> Self {
        TraceRecord { hart, op: TraceOp::SatpWrite, level_hint: 0, reserved: 0, vaddr: 0, satp_raw: satp, payload: 0 }
    }

    pub fn pte_write(paddr: u64, old: u64, new: u64) -> Self {
        TraceRecord {
            hart: 0,
            op: TraceOp::PteWrite,
            level_hint: 0,
            reserved: 0,
            vaddr: paddr,
            satp_raw: old,
            payload: new,
        }
    }

    pub fn fence_op(&self) -> Option<FenceOp> {
        (self.op == TraceOp::Sfence).then(|| FenceOp {
            hart: self.hart,
            vaddr: (self.level_hint & FENCE_HAS_VADDR != 0).then_some(self.vaddr),
            asid: (self.level_hint & FENCE_HAS_ASID != 0).then_some(self.satp_raw as u16),
        })
    }

    pub fn encode(&self) -> [u8; RECORD_SIZE] {
        let mut b = [0u8; RECORD_SIZE];
        b[0..2].copy_from_slice(&self.hart.to_le_bytes());
        b[2] = self.op as u8;
        b[3] = self.level_hint;
        b[4..8].copy_from_slice(&self.reserved.to_le_bytes());
        b[8..16].copy_from_slice(&self.vaddr.to_le_bytes());
        b[16..24].copy_from_slice(&self.satp_raw.to_le_bytes());
        b[24..32].copy_from_slice(&self.payload.to_le_bytes());
        b
    }

    /// `offset` is the record's byte position, used in errors.
    pub fn decode(b: &[u8; RECORD_SIZE], offset: u64) -> Result<Self, TraceError> {
        let u64_at = |i: usize| u64::from_le_bytes(b[i..i + 8].try_into().unwrap());
        let op = TraceOp::from_u8(b[2]).ok_or(TraceError::UnknownOp { op: b[2], offset })?;
        Ok(TraceRecord {
            hart: u16::from_le_bytes([b[0], b[1]]),
            op,
            level_hint: b[3],
            reserved: u32::from_le_bytes(b[4..8].try_into().unwrap()),
            vaddr: u64_at(8),
            satp_raw: u64_at(16),
            payload: u64_at(24),
        })
    }
}

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("bad trace header: magic {0:02x?}")]
    BadMagic([u8; 8]),
    #[error("truncated trace header")]
    TruncatedHeader,
    #[error("unknown op {op} in record at byte offset {offset}")]
    UnknownOp { op: u8, offset: u64 },
    #[error("truncated record at byte offset {offset}")]
    Truncated { offset: u64 },
    #[error("header announces {expected} records, found {found}")]
    CountMismatch { expected: u32, found: u64 },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TraceHeader {
    pub count: u32,
    pub flags: u32,
}

impl TraceHeader {
    pub fn encode(&self) -> [u8; HEADER_SIZE] {
        let mut b = [0u8; HEADER_SIZE];
        b[..8].copy_from_slice(MAGIC);
        b[8..12].copy_from_slice(&self.count.to_le_bytes());
        b[12..16].copy_from_slice(&self.flags.to_le_bytes());
        b
    }
}

pub struct TraceWriter<W: Write> {
    inner: W,
    written: u64,
}

impl<W: Write> TraceWriter<W> {
    /// Writes a streamed header (count 0).
    pub fn new(mut inner: W) -> io::Result<Self> {
        inner.write_all(&TraceHeader::default().encode())?;
        Ok(TraceWriter { inner, written: 0 })
    }

    pub fn write_record(&mut self, rec: &TraceRecord) -> io::Result<()> {
        self.inner.write_all(&rec.encode())?;
        self.written += 1;
        Ok(())
    }

    pub fn records_written(&self) -> u64 {
        self.written
    }

    pub fn finish(self) -> io::Result<W> {
        let mut inner = self.inner;
        inner.flush()?;
        Ok(inner)
    }
}

impl<W: Write + Seek> TraceWriter<W> {
    /// Flushes and fills in the header's record count.
    pub fn finish_counted(self) -> io::Result<W> {
        let n = self.written;
        let mut inner = self.finish()?;
        patch_count(&mut inner, n)?;
        Ok(inner)
    }
}

/// Rewrites the record count of a trace whose header starts at offset 0.
/// Counts beyond `u32::MAX` are left as 0 (streamed).
pub fn patch_count<W: Write + Seek>(w: &mut W, count: u64) -> io::Result<()> {
    let end = w.stream_position()?;
    w.seek(SeekFrom::Start(8))?;
    w.write_all(&u32::try_from(count).unwrap_or(0).to_le_bytes())?;
    w.seek(SeekFrom::Start(end))?;
    w.flush()
}

/// Creates `path` and returns a writer positioned after the header.
pub fn create(path: &Path) -> io::Result<TraceWriter<BufWriter<File>>> {
    TraceWriter::new(BufWriter::new(File::create(path)?))
}

pub struct TraceReader {
    inner: Box<dyn Read>,
    header: TraceHeader,
    offset: u64,
    read: u64,
    done: bool,
}

fn read_full(r: &mut dyn Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..]) {
            Ok(0) => break,
            Ok(k) => n += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(n)
}

impl TraceReader {
    pub fn open(path: &Path) -> Result<Self, TraceError> {
        Self::new(BufReader::new(File::open(path)?))
    }

    /// Reads the header, transparently decompressing gzip input.
    pub fn new<R: Read + 'static>(r: R) -> Result<Self, TraceError> {
        let mut r = BufReader::new(r);
        let mut head = [0u8; HEADER_SIZE];
        let n = read_full(&mut r, &mut head[..2])?;
        let mut inner: Box<dyn Read> = if n == 2 && head[..2] == GZIP_MAGIC {
            Box::new(BufReader::new(GzDecoder::new(io::Cursor::new(GZIP_MAGIC).chain(r))))
        } else {
            Box::new(io::Cursor::new(head[..n].to_vec()).chain(r))
        };
        if read_full(&mut inner, &mut head)? < HEADER_SIZE {
            return Err(TraceError::TruncatedHeader);
        }
        let magic: [u8; 8] = head[..8].try_into().unwrap();
        if &magic != MAGIC {
            return Err(TraceError::BadMagic(magic));
        }
        let header = TraceHeader {
            count: u32::from_le_bytes(head[8..12].try_into().unwrap()),
            flags: u32::from_le_bytes(head[12..16].try_into().unwrap()),
        };
        Ok(TraceReader { inner, header, offset: HEADER_SIZE as u64, read: 0, done: false })
    }

    pub fn header(&self) -> TraceHeader {
        self.header
    }

    fn next_record(&mut self) -> Result<Option<TraceRecord>, TraceError> {
        let mut buf = [0u8; RECORD_SIZE];
        let n = read_full(&mut self.inner, &mut buf)?;
        if n == 0 {
            if self.header.count != 0 && self.read != self.header.count as u64 {
                return Err(TraceError::CountMismatch { expected: self.header.count, found: self.read });
            }
            return Ok(None);
        }
        if n < RECORD_SIZE {
            return Err(TraceError::Truncated { offset: self.offset });
        }
        let rec = TraceRecord::decode(&buf, self.offset)?;
        self.offset += RECORD_SIZE as u64;
        self.read += 1;
        Ok(Some(rec))
    }
}

impl Iterator for TraceReader {
    type Item = Result<TraceRecord, TraceError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let item = self.next_record().transpose();
        if !matches!(item, Some(Ok(_))) {
            self.done = true;
        }
        item
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Decode(#[from] TraceError),
    #[error("record {index}: hart {hart} is not registered")]
    UnknownHart { index: u64, hart: u16 },
    #[error("record {index}: invalid satp value {raw:#x}")]
    BadSatp { index: u64, raw: u64 },
    #[error("record {index}: {source}")]
    Memory { index: u64, source: crate::memory::MemoryError },
}

/// Applies one record to `system`, using recorded leaves instead of walking.
pub fn apply_record(system: &System, rec: &TraceRecord, index: u64) -> Result<(), ReplayError> {
    let unknown = |hart| ReplayError::UnknownHart { index, hart };
    match rec.op {
        TraceOp::Fetch | TraceOp::Load | TraceOp::Store => {
            let source = LeafSource::Recorded {
                pte: PageTableEntry::from_raw(rec.payload),
                level: rec.level_hint as u32,
                pte_addr: rec.satp_raw,
            };
            system.access(rec.hart, rec.vaddr, rec.op.access().unwrap(), source).map_err(|e| match e {
                SimError::UnknownHart(h) => unknown(h),
                SimError::Memory(source) => ReplayError::Memory { index, source },
            })
        }
        TraceOp::Sfence => system.sfence(rec.fence_op().unwrap()).map(|_| ()).map_err(|_| unknown(rec.hart)),
        TraceOp::SatpWrite => {
            let satp = Satp::from_raw(rec.satp_raw).ok_or(ReplayError::BadSatp { index, raw: rec.satp_raw })?;
            system.write_satp(rec.hart, satp).map(|_| ()).map_err(|_| unknown(rec.hart))
        }
        TraceOp::PteWrite => system
            .replay_pte_write(rec.vaddr, rec.satp_raw, rec.payload)
            .map_err(|source| ReplayError::Memory { index, source }),
    }
}

/// Replays every record in order on one thread and returns the final counters.
pub fn replay<I>(records: I, system: &System) -> Result<StatsSnapshot, ReplayError>
where
    I: IntoIterator<Item = Result<TraceRecord, TraceError>>,
{
    for (index, rec) in records.into_iter().enumerate() {
        apply_record(system, &rec?, index as u64)?;
    }
    Ok(system.snapshot())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn op_strategy() -> impl Strategy<Value = TraceOp> {
        (0u8..6).prop_map(|v| TraceOp::from_u8(v).unwrap())
    }

    proptest! {
        #[test]
        fn codec_round_trip(hart: u16, op in op_strategy(), hint: u8, reserved: u32, vaddr: u64, satp: u64, payload: u64) {
            let rec = TraceRecord { hart, op, level_hint: hint, reserved, vaddr, satp_raw: satp, payload };
            let bytes = rec.encode();
            let back = TraceRecord::decode(&bytes, 0).unwrap();
            prop_assert_eq!(back, rec);
            prop_assert_eq!(back.encode(), bytes);
        }
    }

    #[test]
    fn unknown_op_is_rejected() {
        let mut b = TraceRecord::satp_write(0, 0).encode();
        b[2] = 6;
        assert!(matches!(TraceRecord::decode(&b, 48), Err(TraceError::UnknownOp { op: 6, offset: 48 })));
    }

    #[test]
    fn field_layout_is_pinned() {
        let rec = TraceRecord {
            hart: 0x0102,
            op: TraceOp::Store,
            level_hint: 1,
            reserved: 0,
            vaddr: 0x1122334455667788,
            satp_raw: 0x99,
            payload: 0xAA,
        };
        let b = rec.encode();
        assert_eq!(&b[..4], &[0x02, 0x01, 2, 1]);
        assert_eq!(&b[8..16], &[0x88, 0x77, 0x66, 0x55, 0x44, 0x33, 0x22, 0x11]);
        assert_eq!(b[16], 0x99);
        assert_eq!(b[24], 0xAA);
    }

    #[test]
    fn fence_operands_round_trip() {
        for op in [FenceOp::full(3), FenceOp::vaddr(3, 0x1000), FenceOp::asid(3, 0), FenceOp::vaddr_asid(3, 0, 7)] {
            assert_eq!(TraceRecord::sfence(op).fence_op(), Some(op));
        }
    }
}
