use std::path::Path;
use std::process::{Command, Output};

fn tlbsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tlbsim")).args(args).output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let idx = lines.next().unwrap().split(',').position(|c| c == name).unwrap();
    lines.map(|l| l.split(',').nth(idx).unwrap().to_string()).collect()
}

#[test]
fn loop_workload_has_low_l1_miss_rate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("loop.json");
    std::fs::write(
        &cfg,
        r#"{"workload": {"pages_per_hart": 8, "shared_fraction": 0.0, "code_pages": 2,
            "access_pattern": {"kind": "loop", "stride": 1}, "length": 50000}}"#,
    )
    .unwrap();
    let report = dir.path().join("r.json");
    let out = tlbsim(&["run", "--config", p(&cfg), "--report", p(&report)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    let rate = json["runs"][0]["metrics"]["l1_miss_rate"].as_f64().unwrap();
    assert!(rate < 0.01, "l1 miss rate {rate}");
}

#[test]
fn topology_list_gives_one_row_each() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    let out = tlbsim(&["run", "--length", "5000", "--topology", "private,shared,shared_global_asid", "--csv", p(&csv)]);
    assert!(out.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(column(&text, "topology"), ["private", "shared", "shared_global_asid"]);
}

#[test]
fn size_sweep_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("s.csv");
    let out = tlbsim(&[
        "run",
        "--sequential",
        "--length",
        "20000",
        "--topology",
        "shared_global_asid",
        "--l2-size",
        "64,128,256,512",
        "--csv",
        p(&csv),
    ]);
    assert!(out.status.success());
    let rates: Vec<f64> = column(&std::fs::read_to_string(&csv).unwrap(), "l2_local_miss_rate")
        .iter()
        .map(|r| r.parse().unwrap())
        .collect();
    assert_eq!(rates.len(), 4);
    assert!(rates.windows(2).all(|w| w[1] <= w[0]), "{rates:?}");
}

#[test]
fn gen_then_replay_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.trc"), dir.path().join("b.trc"));
    for f in [&a, &b] {
        assert!(tlbsim(&["gen", p(f), "--harts", "2", "--length", "3000", "--seed", "9"]).status.success());
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let (r1, r2) = (dir.path().join("r1.json"), dir.path().join("r2.json"));
    for r in [&r1, &r2] {
        assert!(tlbsim(&["replay", p(&a), "--harts", "2", "--report", p(r)]).status.success());
    }
    let snap = |r: &Path| {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r).unwrap()).unwrap();
        v["runs"][0]["snapshot"].clone()
    };
    assert_eq!(snap(&r1), snap(&r2));
    assert!(snap(&r1)["aggregate"]["l1d"]["lookups"].as_u64().unwrap() > 0);
}

#[test]
fn replay_matches_live_collection() {
    let dir = tempfile::tempdir().unwrap();
    let trace = dir.path().join("live.trc");
    let (live, replayed) = (dir.path().join("live.json"), dir.path().join("replay.json"));
    let args = ["--harts", "4", "--length", "4000", "--topology", "shared_global_asid"];
    let mut run = vec!["run", "--sequential", "--trace", p(&trace), "--report", p(&live)];
    run.extend(args);
    assert!(tlbsim(&run).status.success());
    let mut rep = vec!["replay", p(&trace), "--report", p(&replayed)];
    rep.extend(args);
    assert!(tlbsim(&rep).status.success());
    let snap = |r: &Path| {
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(r).unwrap()).unwrap();
        v["runs"][0]["snapshot"].clone()
    };
    assert_eq!(snap(&live), snap(&replayed));
}

#[test]
fn zero_length_gen_is_header_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("empty.trc");
    assert!(tlbsim(&["gen", p(&out), "--length", "0"]).status.success());
    assert_eq!(std::fs::metadata(&out).unwrap().len(), tlbsim::trace::HEADER_SIZE as u64);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(tlbsim(&["run", "--topology", "bogus"]).status.code(), Some(1));
    assert_eq!(tlbsim(&["run", "--no-such-flag"]).status.code(), Some(1));
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"system": {"harts": 0}}"#).unwrap();
    let out = tlbsim(&["run", "--config", p(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("harts"));

    let missing = dir.path().join("missing.trc");
    assert_eq!(tlbsim(&["replay", p(&missing)]).status.code(), Some(3));
    let corrupt = dir.path().join("corrupt.trc");
    std::fs::write(&corrupt, [0u8; 48]).unwrap();
    let out = tlbsim(&["replay", p(&corrupt)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("header"));
}

#[test]
fn validate_passes_clean_workload() {
    let out = tlbsim(&["validate", "--harts", "2", "--length", "3000"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
}

#[test]
fn config_subcommand_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let out = tlbsim(&["config", "--topology", "shared", "--l2-size", "64", "--harts", "4"]);
    assert!(out.status.success());
    let path = dir.path().join("c.json");
    std::fs::write(&path, &out.stdout).unwrap();
    let again = tlbsim(&["config", "--config", p(&path)]);
    assert_eq!(out.stdout, again.stdout);
}
