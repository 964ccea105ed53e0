use std::io::Write;
use std::sync::Arc;

use flate2::write::GzEncoder;
use flate2::Compression;
use tlbsim::trace::{replay, TraceError, TraceReader, TraceRecord, TraceWriter, RECORD_SIZE};
use tlbsim::workload::{Workload, WorkloadSpec};
use tlbsim::{AccessType, FenceOp, SparseMemory, System, SystemConfig};

fn sample() -> Vec<TraceRecord> {
    vec![
        TraceRecord::satp_write(0, 0x8000_0000_0000_1234),
        TraceRecord::access(0, AccessType::Load, 0x4000_0000, 0, 0x81000, 0xC7),
        TraceRecord::sfence(FenceOp::vaddr_asid(1, 0x5000, 3)),
        TraceRecord::pte_write(0x81000, 0xC7, 0),
    ]
}

fn encode(records: &[TraceRecord]) -> Vec<u8> {
    let mut w = TraceWriter::new(Vec::new()).unwrap();
    for r in records {
        w.write_record(r).unwrap();
    }
    w.finish().unwrap()
}

#[test]
fn plain_and_gzip_read_the_same() {
    let bytes = encode(&sample());
    let mut gz = GzEncoder::new(Vec::new(), Compression::default());
    gz.write_all(&bytes).unwrap();
    let gz = gz.finish().unwrap();
    let plain: Vec<_> = TraceReader::new(std::io::Cursor::new(bytes)).unwrap().map(Result::unwrap).collect();
    let packed: Vec<_> = TraceReader::new(std::io::Cursor::new(gz)).unwrap().map(Result::unwrap).collect();
    assert_eq!(plain, sample());
    assert_eq!(packed, sample());
}

#[test]
fn truncated_record_is_reported() {
    let mut bytes = encode(&sample());
    bytes.truncate(bytes.len() - RECORD_SIZE / 2);
    let results: Vec<_> = TraceReader::new(std::io::Cursor::new(bytes)).unwrap().collect();
    assert!(matches!(results.last(), Some(Err(TraceError::Truncated { .. }))));
}

#[test]
fn bad_magic_is_rejected() {
    let mut bytes = encode(&sample());
    bytes[0] ^= 0xFF;
    assert!(matches!(TraceReader::new(std::io::Cursor::new(bytes)), Err(TraceError::BadMagic(_))));
}

#[test]
fn replay_of_file_matches_live_run() {
    let spec = WorkloadSpec { harts: 2, pages_per_hart: 32, length: 5_000, ..Default::default() };
    let mem = Arc::new(SparseMemory::new());
    let w = Workload::build(&spec, &mem).unwrap();
    let cfg = SystemConfig { harts: 2, ..Default::default() };
    let live = System::new(cfg.clone(), mem).unwrap();
    let file = tempfile::NamedTempFile::new().unwrap();
    live.attach_collector(Box::new(file.reopen().unwrap())).unwrap();
    for e in w.interleaved() {
        live.execute(&e).unwrap();
    }
    assert!(live.detach_collector().unwrap() > 0);
    let fresh = System::new(cfg, Arc::new(SparseMemory::new())).unwrap();
    let got = replay(TraceReader::open(file.path()).unwrap(), &fresh).unwrap();
    assert_eq!(got, live.snapshot());
}
