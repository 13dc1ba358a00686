//! `ymorse`: surveys, flows and cascade homology of lattice Yang-Mills
//! functionals.
//!
//! Exit codes: 0 all checks passed, 1 a check failed, 2 configuration
//! error, 3 runtime error, 4 refused (inadmissible perturbation bank).

mod commands;
mod config;
mod report;
mod seeds;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{Example, Outcome, StartSpec, Stop};
use config::{Overrides, RunConfig};
use report::write_json;

#[derive(Debug, Parser)]
#[command(name = "ymorse", version, about = "Cascade Morse-Bott homology for lattice Yang-Mills")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Locate and classify critical manifolds.
    Survey,
    /// Integrate the gradient flow and write trajectories.
    Flow {
        /// `identity`, `random`, or a connection JSON file.
        #[arg(long, default_value = "random")]
        start: StartSpec,
        #[arg(long, default_value_t = 1)]
        count: usize,
    },
    /// Assemble the cascade chain complex and its Betti numbers.
    Homology,
    /// Derivative, gauge, decay and homology checks.
    Verify,
    /// End-to-end benchmark run.
    Example {
        #[arg(value_enum)]
        name: Example,
    },
}

mod exit {
    pub const CHECK_FAILED: u8 = 1;
    pub const CONFIG: u8 = 2;
    pub const RUNTIME: u8 = 3;
    pub const REFUSED: u8 = 4;
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match RunConfig::resolve(&cli.overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e:#}");
            return ExitCode::from(exit::CONFIG);
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global() {
        eprintln!("worker pool: {e}");
        return ExitCode::from(exit::RUNTIME);
    }
    let outcome: Outcome = match &cli.command {
        Command::Survey => commands::survey(&cfg),
        Command::Flow { start, count } => commands::flow(&cfg, start, *count),
        Command::Homology => commands::homology(&cfg),
        Command::Verify => commands::verify(&cfg),
        Command::Example { name } => commands::example(&cfg, *name),
    };
    let (report, code) = match outcome {
        Ok(r) => {
            let code = if r.passed { 0 } else { exit::CHECK_FAILED };
            (r, code)
        }
        Err(stopped) => {
            let (mut r, s) = *stopped;
            r.passed = false;
            let (code, msg) = match s {
                Stop::Config(e) => (exit::CONFIG, format!("config error: {e:#}")),
                Stop::Runtime(e) => (exit::RUNTIME, format!("error: {e:#}")),
                Stop::Refused(m) => (exit::REFUSED, format!("refused: {m}")),
            };
            eprintln!("{msg}");
            r.error = Some(msg);
            (r, code)
        }
    };
    let path = cfg.output.dir.join("report.json");
    if let Err(e) = write_json(&path, &report) {
        eprintln!("error: {e:#}");
        return ExitCode::from(exit::RUNTIME);
    }
    for c in report.failed() {
        eprintln!("FAIL {}: {} (tolerance {:e})", c.name, c.value, c.tolerance);
    }
    println!("{} -> {}", if report.passed { "ok" } else { "failed" }, path.display());
    ExitCode::from(code)
}
