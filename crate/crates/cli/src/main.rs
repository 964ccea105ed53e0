use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use tlbsim::sharing::ImplDefinedPolicy;
use tlbsim_cli::{CliError, Overrides, Report, RunConfig};

#[derive(Parser)]
#[command(name = "tlbsim", version, about = "Multi-hart RISC-V TLB hierarchy simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured workload live, one driver per hart.
    Run(Common),
    /// Replay a trace file.
    Replay {
        /// Trace to replay (plain or gzip). Overrides --trace.
        path: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Write the workload's trace to a file.
    Gen {
        /// Output trace path.
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Run with validators on; exits 2 on any violation. With --trace
    /// naming an existing file, replays it instead.
    Validate(Common),
    /// Print the effective configuration as JSON.
    Config(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Topology name, or a comma-separated list to compare.
    #[arg(long, value_delimiter = ',')]
    topology: Option<Vec<String>>,
    /// Per-core L2 entries; a comma-separated list sweeps.
    #[arg(long = "l2-size", value_delimiter = ',')]
    l2_size: Option<Vec<usize>>,
    #[arg(long)]
    harts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Accesses per hart.
    #[arg(long)]
    length: Option<usize>,
    /// JSON report output.
    #[arg(long)]
    report: Option<PathBuf>,
    /// CSV output; rows are appended.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Trace file: written by run, read by replay and validate.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Resolution of implementation-defined sharing cases.
    #[arg(long = "impl-defined", value_parser = tlbsim_cli::parse_impl_defined)]
    impl_defined: Option<ImplDefinedPolicy>,
    #[arg(long)]
    label: Option<String>,
    /// Interleave harts round-robin on one thread.
    #[arg(long)]
    sequential: bool,
}

impl Common {
    fn resolve(self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        cfg.apply(Overrides {
            topology: self.topology,
            l2_size: self.l2_size,
            harts: self.harts,
            seed: self.seed,
            length: self.length,
            report: self.report,
            csv: self.csv,
            trace: self.trace,
            impl_defined: self.impl_defined,
            label: self.label,
            sequential: self.sequential,
        })?;
        Ok(cfg)
    }
}

fn finish(report: Report) -> Result<(), CliError> {
    tlbsim_cli::write_outputs(&report)?;
    print!("{}", tlbsim_cli::summary(&report));
    Ok(())
}

fn main_inner(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(common) => finish(tlbsim_cli::run(&common.resolve()?)?),
        Command::Replay { path, common } => {
            let mut cfg = common.resolve()?;
            cfg.trace = path.or(cfg.trace);
            finish(tlbsim_cli::replay(&cfg)?)
        }
        Command::Gen { out, common } => {
            let cfg = common.resolve()?;
            let n = tlbsim_cli::gen(&cfg, &out)?;
            println!("wrote {n} records to {}", out.display());
            Ok(())
        }
        Command::Validate(common) => {
            let report = tlbsim_cli::validate(&common.resolve()?)?;
            let violations: Vec<_> = report.runs.iter().flat_map(|r| r.violations.iter()).cloned().collect();
            finish(report)?;
            for v in &violations {
                println!("violation {v}");
            }
            match violations.len() {
                0 => Ok(()),
                n => Err(CliError::Runtime(format!("{n} violations"))),
            }
        }
        Command::Config(common) => {
            let cfg = common.resolve()?;
            cfg.validate()?;
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match main_inner(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
