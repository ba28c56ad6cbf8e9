//! Command-line front end, kept in the library so the exact CLI code path
//! can be driven in-process.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use positioner_core::StoreError;
use serde::Serialize;
use thiserror::Error;

use crate::{compare, grid, stats, sweep, AnalysisError, Run};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Usage(#[from] clap::Error),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl CliError {
    /// 2 when an archive cannot be read or parsed, 1 for anything else.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(e) => e.exit_code() as u8,
            CliError::Analysis(AnalysisError::Store(
                StoreError::Format(_) | StoreError::Storage(_),
            )) => 2,
            CliError::Analysis(_) => 1,
        }
    }
}

/// Parses `args` (including the program name) and runs the command,
/// returning what it would print on stdout.
pub fn execute<I, T>(args: I) -> Result<String, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    Ok(run(cli)?)
}

#[derive(Parser)]
#[command(
    name = "scan-analysis",
    version,
    about = "Analyze positioner scan archives"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Copy)]
#[group(multiple = false)]
struct Format {
    /// Emit CSV
    #[arg(long)]
    csv: bool,
    /// Emit JSON
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Pooled and per-position mean / standard deviation
    Stats {
        archive: PathBuf,
        /// Also list every position in the human-readable output
        #[arg(long)]
        per_position: bool,
        #[command(flatten)]
        format: Format,
    },
    /// Per-θ means at a fixed arm angle
    Sweep {
        archive: PathBuf,
        #[arg(long)]
        phi: f64,
        #[command(flatten)]
        format: Format,
    },
    /// θ × φ matrix of mean distances
    Grid {
        archive: PathBuf,
        #[command(flatten)]
        format: Format,
    },
    /// Per-position mean differences between two runs
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[command(flatten)]
        format: Format,
    },
}

fn load(path: &Path) -> Result<Run, AnalysisError> {
    Run::load(path)
}

fn print_json<T: Serialize>(out: &mut String, value: &T) {
    writeln!(
        out,
        "{}",
        serde_json::to_string_pretty(value).expect("serializable")
    )
    .unwrap();
}

fn run(cli: Cli) -> Result<String, AnalysisError> {
    let mut out = String::new();
    match cli.command {
        Command::Stats {
            archive,
            per_position,
            format,
        } => {
            let run = load(&archive)?;
            let s = stats(&run.records)?;
            if format.json {
                print_json(&mut out, &s);
            } else if format.csv {
                writeln!(out, "index,theta_deg,phi_deg,mean_cm,std_cm,n").unwrap();
                for p in &s.per_position {
                    writeln!(
                        out,
                        "{},{},{},{},{},{}",
                        p.index, p.theta, p.phi, p.mean_cm, p.std_cm, p.n
                    )
                    .unwrap();
                }
            } else {
                writeln!(out, "run            {}", run.config.run_id).unwrap();
                writeln!(out, "positions      {}", s.per_position.len()).unwrap();
                writeln!(out, "samples        {}", s.total_samples).unwrap();
                writeln!(out, "mean distance  {:.3} cm", s.overall_mean_cm).unwrap();
                writeln!(out, "std deviation  {:.3} cm", s.overall_std_cm).unwrap();
                if per_position {
                    writeln!(out).unwrap();
                    writeln!(
                        out,
                        "{:>6} {:>8} {:>8} {:>10} {:>9} {:>6}",
                        "index", "theta", "phi", "mean_cm", "std_cm", "n"
                    )
                    .unwrap();
                    for p in &s.per_position {
                        writeln!(
                            out,
                            "{:>6} {:>8.2} {:>8.2} {:>10.3} {:>9.3} {:>6}",
                            p.index, p.theta, p.phi, p.mean_cm, p.std_cm, p.n
                        )
                        .unwrap();
                    }
                }
            }
        }
        Command::Sweep {
            archive,
            phi,
            format,
        } => {
            let series = sweep(&load(&archive)?, phi)?;
            if format.json {
                print_json(&mut out, &series);
            } else if format.csv {
                writeln!(out, "theta_deg,mean_cm").unwrap();
                for p in &series.points {
                    writeln!(out, "{},{}", p.theta, p.mean_cm).unwrap();
                }
            } else {
                writeln!(out, "phi = {}°", series.fixed_phi).unwrap();
                writeln!(out, "{:>8} {:>10}", "theta", "mean_cm").unwrap();
                for p in &series.points {
                    writeln!(out, "{:>8.2} {:>10.3}", p.theta, p.mean_cm).unwrap();
                }
            }
        }
        Command::Grid { archive, format } => {
            let g = grid(&load(&archive)?)?;
            if format.json {
                print_json(&mut out, &g);
            } else if format.csv {
                write!(out, "{}", g.to_csv()).unwrap();
            } else {
                write!(out, "{:>8}", "θ \\ φ").unwrap();
                for phi in &g.phi_deg {
                    write!(out, " {:>7}", phi).unwrap();
                }
                writeln!(out).unwrap();
                for (theta, row) in g.theta_deg.iter().zip(&g.mean_cm) {
                    write!(out, "{:>8}", theta).unwrap();
                    for cell in row {
                        match cell {
                            Some(v) => write!(out, " {:>7.2}", v).unwrap(),
                            None => write!(out, " {:>7}", "-").unwrap(),
                        }
                    }
                    writeln!(out).unwrap();
                }
            }
        }
        Command::Compare { a, b, format } => {
            let c = compare(&load(&a)?, &load(&b)?)?;
            if format.json {
                print_json(&mut out, &c);
            } else if format.csv {
                writeln!(out, "index,theta_deg,phi_deg,delta_cm").unwrap();
                for d in &c.per_position_deltas {
                    writeln!(out, "{},{},{},{}", d.index, d.theta, d.phi, d.delta_cm).unwrap();
                }
            } else {
                writeln!(out, "positions compared   {}", c.per_position_deltas.len()).unwrap();
                writeln!(out, "overall mean diff    {:.3} cm", c.overall_mean_diff_cm).unwrap();
                writeln!(out, "max |position diff|  {:.3} cm", c.max_abs_mean_diff_cm).unwrap();
            }
        }
    }
    Ok(out)
}
