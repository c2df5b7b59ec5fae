use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mobifl::fedcore::RunStatus;
use mobifl::harness::{
    self, emit_plotdata, load_trace_files, parse_config, parse_sweep, summarize, sweep, write_sweep, TraceFile,
};
use mobifl::Error;

/// Hierarchical federated learning with mobile users.
#[derive(Parser)]
#[command(name = "mobifl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its trace as CSV and JSON.
    Run {
        config: PathBuf,
        /// Output directory.
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
        /// File stem for the trace files; defaults to the algorithm name.
        #[arg(long)]
        name: Option<String>,
    },
    /// Run a parameter sweep and write one trace per cell plus a summary.
    Sweep {
        spec: PathBuf,
        #[arg(short, long, default_value = "sweep-out")]
        out: PathBuf,
    },
    /// Evaluate the convergence bounds for a config and print JSON.
    Bounds { config: PathBuf },
    /// Estimate the assumption constants for a config and print JSON.
    Estimate { config: PathBuf },
    /// Turn the trace files in a directory into long-format plot data.
    Plotdata {
        dir: PathBuf,
        /// Where to write the CSVs; defaults to `<dir>/plotdata`.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes a line to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(line: &str) -> Result<(), Error> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(e.into()),
        _ => Ok(()),
    }
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Error> {
    emit(&serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?)
}

fn execute(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { config, out, name } => {
            let cfg = parse_config(&config)?;
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            let trace = harness::run(&cfg, &base_dir(&config))?;
            let series = name.unwrap_or_else(|| cfg.algorithm.name().to_string());
            let status = trace.status.clone();
            let file = TraceFile { series: series.clone(), seed: cfg.seed, config: cfg, trace };
            let (csv, json) = harness::write_trace_files(&out, &series, &file)?;
            eprintln!("wrote {} and {}", csv.display(), json.display());
            if let Some(acc) = file.trace.final_accuracy() {
                emit(&format!("final accuracy {acc:.4}"))?;
            }
            if let RunStatus::Diverged { round, message } = status {
                eprintln!("diverged at edge round {round}: {message}");
                return Ok(ExitCode::from(2));
            }
        }
        Command::Sweep { spec, out } => {
            let s = parse_sweep(&spec)?;
            let cells = sweep(&s, &base_dir(&spec))?;
            write_sweep(&cells, &out)?;
            for row in summarize(&cells) {
                emit(&format!(
                    "{:<24} {:.4} ± {:.4}  ({} ok, {} failed)",
                    row.series, row.mean_accuracy, row.std_accuracy, row.completed, row.failed
                ))?;
            }
        }
        Command::Bounds { config } => print_json(&harness::bounds_report(&parse_config(&config)?)?)?,
        Command::Estimate { config } => {
            let cfg = parse_config(&config)?;
            print_json(&harness::estimate(&cfg, &base_dir(&config))?)?;
        }
        Command::Plotdata { dir, out } => {
            let traces = load_trace_files(&dir)?;
            let out = out.unwrap_or_else(|| dir.join("plotdata"));
            for p in emit_plotdata(&traces, &out)? {
                eprintln!("wrote {}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::NumericDivergence(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
