//! Command-line front end. [`run_command`] maps every outcome to the exit
//! code contract:
//!
//! | code | meaning |
//! |---|---|
//! | 0 | converged run, passing barrier check, successful oracle or residual |
//! | 1 | barrier check fails |
//! | 2 | run stopped at the horizon (including the oscillating status) |
//! | 3 | invalid configuration or arguments |
//! | 4 | numerical breakdown |
//! | 5 | output I/O failure |

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use serde::Serialize;

use crate::diagnostics;
use crate::flow::{self, FlowProblem, RunStatus};
use crate::grid::ScalarField;
use crate::io::{self, Config};
use crate::orlicz;
use crate::par;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONDITION_FAILS: i32 = 1;
pub const EXIT_HORIZON: i32 = 2;
pub const EXIT_INVALID: i32 = 3;
pub const EXIT_BREAKDOWN: i32 = 4;
pub const EXIT_IO: i32 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "capflow",
    version,
    about = "Anisotropic capillary Gauss curvature flow on spherical caps"
)]
struct Cli {
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (overrides output.dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Seed for random initial perturbations (overrides the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the flow and write time series, snapshots and the report.
    Run,
    /// Sample the barrier condition for the configured f and phi.
    CheckCondition,
    /// Integrate the cap ODE u' = u(1 - f u^-n / phi(u)) for phi = s^(1-p).
    Oracle {
        #[arg(long)]
        p: f64,
        #[arg(long)]
        f: f64,
        #[arg(long)]
        u0: f64,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        t: f64,
    },
    /// Stationary residual of a snapshot file on the configured grid.
    Residual {
        #[arg(long)]
        snapshot: PathBuf,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_INVALID
            } else {
                EXIT_OK
            };
        }
    };
    par::init_from_env();
    match &cli.command {
        Command::Run => cmd_run(&cli),
        Command::CheckCondition => cmd_check(&cli),
        Command::Oracle { p, f, u0, n, t } => cmd_oracle(*p, *f, *u0, *n, *t),
        Command::Residual { snapshot } => cmd_residual(&cli, snapshot),
    }
}

fn config(cli: &Cli) -> Result<Config, i32> {
    let Some(path) = &cli.config else {
        eprintln!("error: --config is required for this command");
        return Err(EXIT_INVALID);
    };
    let cfg = io::load_config(path).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_INVALID
    })?;
    Ok(match cli.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn problem(cfg: &Config) -> Result<FlowProblem, i32> {
    FlowProblem::from_config(&cfg.flow).map_err(|e| {
        eprintln!("error: {e}");
        EXIT_INVALID
    })
}

fn cmd_run(cli: &Cli) -> i32 {
    let cfg = match config(cli) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let prob = match problem(&cfg) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let h0 = match prob.initial_h(&cfg.flow.h0, cfg.flow.seed) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    let report = match flow::run_problem(&prob, h0, &cfg.flow) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_BREAKDOWN;
        }
    };
    let dir = cli
        .out
        .clone()
        .or_else(|| cfg.output.dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    if let Err(e) = io::emit_outputs(&report, &cfg, &prob.grid, &dir) {
        eprintln!("error: {e}");
        return EXIT_IO;
    }
    if !cli.quiet {
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        println!(
            "{} at t = {:.6} after {} steps ({} rejected); residual_inf = {:.3e}, wall {:.2}s",
            report.status.as_str(),
            report.t_final,
            report.steps,
            report.rejects,
            report.residual_inf,
            report.wall_time
        );
    }
    match report.status {
        RunStatus::Converged => EXIT_OK,
        RunStatus::Horizon | RunStatus::Oscillating => EXIT_HORIZON,
        RunStatus::Breakdown => EXIT_BREAKDOWN,
    }
}

fn cmd_check(cli: &Cli) -> i32 {
    let cfg = match config(cli) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let prob = match problem(&cfg) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let report = prob.condition_report(&cfg.flow.barrier);
    match serde_json::to_string_pretty(&report) {
        Ok(s) => println!("{s}"),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    }
    if report.passes {
        EXIT_OK
    } else {
        EXIT_CONDITION_FAILS
    }
}

fn cmd_oracle(p: f64, f: f64, u0: f64, n: usize, t: f64) -> i32 {
    let phi = match orlicz::make_power(p) {
        Ok(phi) => phi,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    match diagnostics::cap_ode_oracle(u0, f, &phi, n, t) {
        Ok(u) => {
            println!("{u:.6}");
            EXIT_OK
        }
        Err(diagnostics::OracleError::InvalidInput(m)) => {
            eprintln!("error: {m}");
            EXIT_INVALID
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_BREAKDOWN
        }
    }
}

#[derive(Serialize)]
struct ResidualOut {
    nodes: usize,
    max_norm: f64,
    l2_norm: f64,
}

fn cmd_residual(cli: &Cli, snapshot: &std::path::Path) -> i32 {
    let cfg = match config(cli) {
        Ok(c) => c,
        Err(code) => return code,
    };
    let prob = match problem(&cfg) {
        Ok(p) => p,
        Err(code) => return code,
    };
    let rows = match io::read_snapshot(snapshot) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_IO;
        }
    };
    let h = match io::snapshot_field(snapshot, &rows, &prob.grid) {
        Ok(h) => ScalarField::new(h),
        Err(e) => {
            eprintln!("error: {e}");
            return EXIT_INVALID;
        }
    };
    match flow::stationary_residual(&prob.grid, &h, &prob.f, &prob.phi) {
        Ok(r) => {
            let out = ResidualOut {
                nodes: prob.grid.len(),
                max_norm: r.max_norm,
                l2_norm: r.l2_norm,
            };
            println!("{}", serde_json::to_string_pretty(&out).unwrap_or_default());
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_BREAKDOWN
        }
    }
}
