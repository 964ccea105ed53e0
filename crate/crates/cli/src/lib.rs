//! Run configuration, execution and report writing for the `tlbsim` binary.

use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use tlbsim::driver::{drive, drive_sequential, map_jobs};
use tlbsim::sharing::ImplDefinedPolicy;
use tlbsim::stats::{DerivedMetrics, StatsSnapshot};
use tlbsim::trace::{self, TraceError, TraceReader};
use tlbsim::validate::Violation;
use tlbsim::workload::{Workload, WorkloadSpec};
use tlbsim::{SparseMemory, System, SystemConfig, Topology};

/// Process exit status classes.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Runtime(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn trace_err(path: &Path, e: TraceError) -> CliError {
    match e {
        TraceError::Io(e) => io_err(path, e),
        other => CliError::Runtime(format!("{}: {other}", path.display())),
    }
}

/// Everything a run needs. Loaded from JSON; command-line flags override.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub label: String,
    pub system: SystemConfig,
    pub workload: WorkloadSpec,
    /// Live runs collect into this file; replay and validate read from it.
    pub trace: Option<PathBuf>,
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// Extra topologies to run alongside `system.topology`, by name.
    pub topologies: Vec<String>,
    /// Per-core L2 sizes to sweep over.
    pub sweep: Vec<usize>,
    /// Interleave harts round-robin on one thread for reproducible results.
    pub sequential: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            label: "run".into(),
            system: SystemConfig::default(),
            workload: WorkloadSpec::default(),
            trace: None,
            report: None,
            csv: None,
            topologies: Vec::new(),
            sweep: Vec::new(),
            sequential: false,
        }
    }
}

/// Flag values that override a loaded [`RunConfig`].
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub topology: Option<Vec<String>>,
    pub l2_size: Option<Vec<usize>>,
    pub harts: Option<usize>,
    pub seed: Option<u64>,
    pub length: Option<usize>,
    pub report: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    pub trace: Option<PathBuf>,
    pub impl_defined: Option<ImplDefinedPolicy>,
    pub label: Option<String>,
    pub sequential: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply(&mut self, o: Overrides) -> Result<(), CliError> {
        if let Some(h) = o.harts {
            let per_core = self.system.topology.l2_per_core(self.system.harts);
            self.system.harts = h;
            self.workload.harts = h;
            self.system.topology = rebuild(&self.system.topology, self.system.topology.name(), per_core, h)?;
        }
        if let Some(mut names) = o.topology {
            if names.is_empty() {
                return Err(CliError::Config("topology: empty list".into()));
            }
            let per_core = self.per_core();
            let first = names.remove(0);
            self.system.topology = rebuild(&self.system.topology, &first, per_core, self.system.harts)?;
            self.topologies = names;
        }
        if let Some(mut sizes) = o.l2_size {
            if sizes.len() == 1 {
                let size = sizes.remove(0);
                let name = self.system.topology.name();
                self.system.topology = rebuild(&self.system.topology, name, size, self.system.harts)?;
                self.sweep.clear();
            } else {
                self.sweep = sizes;
            }
        }
        if let Some(s) = o.seed {
            self.workload.seed = s;
        }
        if let Some(l) = o.length {
            self.workload.length = l;
        }
        if let Some(p) = o.impl_defined {
            self.system.impl_defined = p;
        }
        self.report = o.report.or(self.report.take());
        self.csv = o.csv.or(self.csv.take());
        self.trace = o.trace.or(self.trace.take());
        self.sequential |= o.sequential;
        if let Some(l) = o.label {
            self.label = l;
        }
        Ok(())
    }

    fn per_core(&self) -> usize {
        match self.system.topology.l2_per_core(self.system.harts) {
            0 => 128,
            n => n,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.system.validate().map_err(|e| CliError::Config(format!("system.{e}")))?;
        self.workload.validate().map_err(|e| CliError::Config(format!("workload.{e}")))?;
        if self.workload.harts != self.system.harts {
            return Err(CliError::Config(format!(
                "workload.harts ({}) must equal system.harts ({})",
                self.workload.harts, self.system.harts
            )));
        }
        for name in &self.topologies {
            if Topology::from_name(name, 1, 1).is_none() {
                return Err(CliError::Config(format!("topologies: unknown topology {name:?}")));
            }
        }
        if let Some(bad) = self.sweep.iter().find(|&&s| s == 0) {
            return Err(CliError::Config(format!("sweep: L2 size must be positive, got {bad}")));
        }
        Ok(())
    }

    /// One system configuration per (topology, size) point.
    pub fn points(&self) -> Result<Vec<SystemConfig>, CliError> {
        let mut names = vec![self.system.topology.name().to_string()];
        names.extend(self.topologies.iter().cloned());
        let sizes = if self.sweep.is_empty() { vec![self.per_core()] } else { self.sweep.clone() };
        let mut out = Vec::new();
        for name in &names {
            for &size in &sizes {
                let topology = rebuild(&self.system.topology, name, size, self.system.harts)?;
                out.push(SystemConfig { topology, ..self.system.clone() });
            }
        }
        Ok(out)
    }
}

/// Topology `name` at `per_core` entries; keeps `current` unchanged when it
/// already is that topology at that size.
fn rebuild(current: &Topology, name: &str, per_core: usize, harts: usize) -> Result<Topology, CliError> {
    let t = Topology::from_name(name, per_core, harts).ok_or_else(|| {
        CliError::Config(format!(
            "topology: unknown topology {name:?} (expected one of l1_only, private, shared, shared_untagged, shared_global_asid)"
        ))
    })?;
    if current.name() == t.name() && current.l2_per_core(harts) == per_core {
        Ok(*current)
    } else {
        Ok(t)
    }
}

pub fn parse_impl_defined(s: &str) -> Result<ImplDefinedPolicy, String> {
    match s {
        "share" => Ok(ImplDefinedPolicy::Share),
        "noshare" | "no_share" => Ok(ImplDefinedPolicy::NoShare),
        other => Err(format!("expected share or noshare, got {other:?}")),
    }
}

/// Outcome of one simulated configuration.
#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub label: String,
    pub topology: String,
    pub l2_per_core: usize,
    pub harts: usize,
    pub seed: u64,
    pub source: String,
    pub snapshot: StatsSnapshot,
    pub metrics: DerivedMetrics,
    pub violations: Vec<Violation>,
}

impl RunResult {
    fn new(cfg: &RunConfig, system: &SystemConfig, source: String, sys: &System) -> Self {
        let snapshot = sys.snapshot();
        RunResult {
            label: cfg.label.clone(),
            topology: system.topology.name().into(),
            l2_per_core: system.topology.l2_per_core(system.harts),
            harts: system.harts,
            seed: cfg.workload.seed,
            source,
            metrics: snapshot.metrics(),
            snapshot,
            violations: sys.violations(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub config: RunConfig,
    pub runs: Vec<RunResult>,
}

fn build(cfg: &RunConfig, system: SystemConfig) -> Result<(System, Workload), CliError> {
    let mem = Arc::new(SparseMemory::new());
    let workload = Workload::build(&cfg.workload, &mem).map_err(|e| CliError::Config(format!("workload.{e}")))?;
    let sys = System::new(system, mem).map_err(|e| CliError::Config(format!("system.{e}")))?;
    Ok((sys, workload))
}

/// Runs the workload live under every configured point.
pub fn run(cfg: &RunConfig) -> Result<Report, CliError> {
    cfg.validate()?;
    let points = cfg.points()?;
    if points.len() > 1 && cfg.trace.is_some() {
        return Err(CliError::Config("trace: collection needs a single topology and size".into()));
    }
    let results = map_jobs(points, |system| -> Result<RunResult, CliError> {
        let (sys, workload) = build(cfg, system.clone())?;
        if let Some(path) = &cfg.trace {
            let file = File::create(path).map_err(|e| io_err(path, e))?;
            sys.attach_collector(Box::new(BufWriter::new(file))).map_err(|e| io_err(path, e))?;
        }
        let streams = (0..system.harts as u16).map(|h| workload.hart_stream(h)).collect();
        let driven = if cfg.sequential { drive_sequential(&sys, streams) } else { drive(&sys, streams) };
        driven.map_err(|e| CliError::Runtime(e.to_string()))?;
        if let Some(path) = &cfg.trace {
            let n = sys.detach_collector().map_err(|e| io_err(path, e))?;
            log::info!("wrote {n} trace records to {}", path.display());
        }
        Ok(RunResult::new(cfg, &system, "live".into(), &sys))
    });
    let runs = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(Report { config: cfg.clone(), runs })
}

/// Replays `cfg.trace` into each configured point.
pub fn replay(cfg: &RunConfig) -> Result<Report, CliError> {
    cfg.system.validate().map_err(|e| CliError::Config(format!("system.{e}")))?;
    let path = cfg.trace.as_ref().ok_or_else(|| CliError::Config("trace: a trace path is required".into()))?;
    let mut runs = Vec::new();
    for system in cfg.points()? {
        let reader = TraceReader::open(path).map_err(|e| trace_err(path, e))?;
        let sys = System::new(system.clone(), Arc::new(SparseMemory::new()))
            .map_err(|e| CliError::Config(format!("system.{e}")))?;
        trace::replay(reader, &sys).map_err(|e| match e {
            trace::ReplayError::Decode(t) => trace_err(path, t),
            other => CliError::Runtime(format!("{}: {other}", path.display())),
        })?;
        runs.push(RunResult::new(cfg, &system, format!("replay:{}", path.display()), &sys));
    }
    Ok(Report { config: cfg.clone(), runs })
}

/// Runs (or replays, with a trace) with validators on. Violations become
/// a runtime error after the report is written by the caller.
pub fn validate(cfg: &RunConfig) -> Result<Report, CliError> {
    let mut cfg = cfg.clone();
    cfg.system.validators = true;
    match &cfg.trace {
        Some(path) if path.exists() => replay(&cfg),
        _ => run(&cfg),
    }
}

/// Generates the workload's trace deterministically on one thread.
pub fn gen(cfg: &RunConfig, out: &Path) -> Result<u64, CliError> {
    cfg.validate()?;
    let (sys, workload) = build(cfg, cfg.system.clone())?;
    let file = File::create(out).map_err(|e| io_err(out, e))?;
    sys.attach_collector(Box::new(BufWriter::new(file))).map_err(|e| io_err(out, e))?;
    let streams = (0..cfg.system.harts as u16).map(|h| workload.hart_stream(h)).collect();
    drive_sequential(&sys, streams).map_err(|e| CliError::Runtime(e.to_string()))?;
    sys.detach_collector().map_err(|e| io_err(out, e))
}

pub const CSV_HEADER: &str = "label,topology,l2_per_core,harts,seed,source,l1_miss_rate,l2_local_miss_rate,mpki,\
l1i_lookups,l1i_misses,l1d_lookups,l1d_misses,l2_lookups,l2_hits,l2_misses,l2_evictions,walks,\
fences_full,fences_vaddr,fences_asid,fences_vaddr_asid,never_accessed,previously_invalid,\
previously_nonwritable,necessary,violations";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn csv_row(r: &RunResult) -> String {
    let a = &r.snapshot.aggregate;
    let c = &a.fence_categories;
    let fields: Vec<String> = vec![
        csv_field(&r.label),
        r.topology.clone(),
        r.l2_per_core.to_string(),
        r.harts.to_string(),
        r.seed.to_string(),
        csv_field(&r.source),
        opt(r.metrics.l1_miss_rate),
        opt(r.metrics.l2_local_miss_rate),
        opt(r.metrics.mpki),
        a.l1i.lookups.to_string(),
        a.l1i.misses.to_string(),
        a.l1d.lookups.to_string(),
        a.l1d.misses.to_string(),
        a.l2.lookups.to_string(),
        a.l2.hits.to_string(),
        a.l2.misses.to_string(),
        a.l2.evictions.to_string(),
        a.walks.to_string(),
        a.fences.full.to_string(),
        a.fences.vaddr.to_string(),
        a.fences.asid.to_string(),
        a.fences.vaddr_asid.to_string(),
        c.never_accessed.to_string(),
        c.previously_invalid.to_string(),
        c.previously_nonwritable.to_string(),
        c.necessary.to_string(),
        r.violations.len().to_string(),
    ];
    fields.join(",")
}

/// Writes the JSON report and CSV table where configured. The CSV gains a
/// header when the file is new or empty, so runs can append rows.
pub fn write_outputs(report: &Report) -> Result<(), CliError> {
    if let Some(path) = &report.config.report {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        serde_json::to_writer_pretty(&mut w, report).map_err(|e| io_err(path, e))?;
        writeln!(w).and_then(|_| w.flush()).map_err(|e| io_err(path, e))?;
    }
    if let Some(path) = &report.config.csv {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| io_err(path, e))?;
        let mut w = BufWriter::new(file);
        let mut text = String::new();
        if fresh {
            text.push_str(CSV_HEADER);
            text.push('\n');
        }
        for r in &report.runs {
            text.push_str(&csv_row(r));
            text.push('\n');
        }
        w.write_all(text.as_bytes()).and_then(|_| w.flush()).map_err(|e| io_err(path, e))?;
    }
    Ok(())
}

/// One line per run for the terminal.
pub fn summary(report: &Report) -> String {
    let mut out = String::new();
    for r in &report.runs {
        let m = &r.metrics;
        out.push_str(&format!(
            "{} {} l2/core={} l1_miss_rate={} l2_miss_rate={} mpki={} walks={} violations={}\n",
            r.label,
            r.topology,
            r.l2_per_core,
            opt(m.l1_miss_rate),
            opt(m.l2_local_miss_rate),
            opt(m.mpki),
            r.snapshot.aggregate.walks,
            r.violations.len()
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_baseline() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.system.l1d.entries, 32);
        assert_eq!(cfg.system.topology.l2_per_core(8), 128);
        let shared = Topology::from_name("shared", 128, 8).unwrap();
        assert_eq!(shared.l2_geometry().unwrap().entries, 1024);
    }

    #[test]
    fn config_round_trips_without_unknown_fields() {
        let cfg = RunConfig { sweep: vec![64, 128], ..Default::default() };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&text).unwrap(), cfg);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn overrides_reshape_topology() {
        let mut cfg = RunConfig::default();
        cfg.apply(Overrides {
            topology: Some(vec!["shared_global_asid".into(), "private".into()]),
            l2_size: Some(vec![64]),
            harts: Some(4),
            ..Default::default()
        })
        .unwrap();
        assert_eq!(cfg.system.topology.name(), "shared_global_asid");
        assert_eq!(cfg.system.topology.l2_geometry().unwrap().entries, 256);
        assert_eq!(cfg.workload.harts, 4);
        assert_eq!(cfg.points().unwrap().len(), 2);
    }

    #[test]
    fn csv_columns_line_up() {
        let cfg =
            RunConfig { workload: WorkloadSpec { harts: 8, length: 100, ..Default::default() }, ..Default::default() };
        let report = run(&cfg).unwrap();
        let row = csv_row(&report.runs[0]);
        assert_eq!(row.split(',').count(), CSV_HEADER.split(',').count());
    }

    #[test]
    fn mismatched_harts_is_a_config_error() {
        let cfg = RunConfig { workload: WorkloadSpec { harts: 2, ..Default::default() }, ..Default::default() };
        assert_eq!(cfg.validate().unwrap_err().exit_code(), 1);
    }
}
