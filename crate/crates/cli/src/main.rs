//! `wavekv` command-line driver.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use wavekv::harness::{
    gen_trace, load_synth_params, oracle_outputs, read_trace, run, sweep, write_trace, RunConfig,
    RunOptions, SweepAxis,
};
use wavekv::Error;

#[derive(Parser)]
#[command(
    name = "wavekv",
    version,
    about = "Clustered KV-cache retrieval: traces, runs, oracles and sweeps"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic trace from a JSON parameter file.
    GenTrace {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the engine over a trace and write a JSON report.
    Run {
        #[arg(long)]
        trace: PathBuf,
        /// JSON config `{"engine": {...}}`; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
        /// Compare every step against full attention.
        #[arg(long)]
        with_oracle: bool,
        /// Also write the full-attention outputs (implies --with-oracle).
        #[arg(long)]
        oracle_out: Option<PathBuf>,
        /// Include wall-clock timing in the report.
        #[arg(long)]
        timing: bool,
    },
    /// Dump full-attention outputs for every step and head.
    Oracle {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run once per value of one config axis, one report per point.
    Sweep {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// retrieval_fraction | estimation_fraction | segment_size | cache_fraction
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn write_json(path: &Path, text: &str) -> wavekv::Result<()> {
    fs::write(path, format!("{text}\n"))?;
    Ok(())
}

fn load_config(path: Option<&Path>) -> wavekv::Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn execute(cmd: Command) -> wavekv::Result<()> {
    match cmd {
        Command::GenTrace { params, out } => {
            let trace = gen_trace(&load_synth_params(&params)?)?;
            write_trace(&out, &trace)?;
            println!("wrote {}", out.display());
        }
        Command::Run {
            trace,
            config,
            report,
            with_oracle,
            oracle_out,
            timing,
        } => {
            let cfg = load_config(config.as_deref())?;
            let trace = read_trace(&trace)?;
            let opts = RunOptions {
                with_oracle: with_oracle || oracle_out.is_some(),
                timing,
            };
            let out = run(&trace, &cfg.engine, opts)?;
            write_json(&report, &out.report.to_json()?)?;
            if let (Some(path), Some(dump)) = (oracle_out, out.oracle) {
                write_json(&path, &serde_json::to_string(&dump)?)?;
            }
            println!("wrote {}", report.display());
        }
        Command::Oracle { trace, out } => {
            let dump = oracle_outputs(&read_trace(&trace)?)?;
            write_json(&out, &serde_json::to_string(&dump)?)?;
            println!("wrote {}", out.display());
        }
        Command::Sweep {
            trace,
            config,
            axis,
            values,
            out_dir,
        } => {
            let axis: SweepAxis = axis.parse()?;
            let cfg = load_config(config.as_deref())?;
            let trace = read_trace(&trace)?;
            let reports = sweep(&trace, &cfg.engine, axis, &values)?;
            fs::create_dir_all(&out_dir)?;
            for (value, report) in values.iter().zip(&reports) {
                let path = out_dir.join(format!("{}_{value}.json", axis.name()));
                write_json(&path, &report.to_json()?)?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Json(_) => 2,
        Error::Format { .. } => 3,
        Error::Io(_) => 4,
        Error::Integrity(_) => 5,
    }
}

fn fail(kind: &str, message: String, code: u8) -> ExitCode {
    let obj = serde_json::json!({ "error": { "kind": kind, "message": message } });
    eprintln!("{obj}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return fail("usage", e.to_string().trim_end().to_owned(), 64),
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.to_string(), exit_code(&e)),
    }
}
