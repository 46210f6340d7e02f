//! `revelio`: detect carrier-grade NAT from inside a home network, live or
//! against simulated topologies, and summarise fleets of results.
//!
//! Exit status: 0 on success, 1 on operational errors, 2 on usage errors.

mod commands;
mod config;

use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};

use revelio_core::par::Exec;

use commands::{ClassifyArgs, CorpusArgs, Env, ReportArgs, RunArgs, SimulateArgs};
use config::{FileConfig, UsageError};

#[derive(Debug, Parser)]
#[command(name = "revelio", version, about = "Detect carrier-grade NAT from inside a home network")]
struct Cli {
    /// More logging on stderr; repeat for debug output
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    /// Write output here instead of stdout
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,
    /// key = value configuration file; defaults to $REVELIO_CONFIG
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Zero all timestamps in raw-run output so reruns compare byte for byte
    #[arg(long, global = true)]
    deterministic: bool,
    /// Process everything on one thread
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Probe the live network once (needs raw socket privileges)
    Run(RunArgs),
    /// Run sessions against topologies from a file
    Simulate(SimulateArgs),
    /// Turn raw runs into per-device states and verdicts
    Classify(ClassifyArgs),
    /// Summarise states and verdicts per ISP, hop distance, realm or GRA
    Report(ReportArgs),
    /// Generate labelled topologies, optionally simulating and scoring them
    Corpus(CorpusArgs),
}

fn open_output(path: Option<&PathBuf>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) if p.as_os_str() != "-" => {
            let f = std::fs::File::create(p).map_err(|e| anyhow::anyhow!("cannot create {}: {e}", p.display()))?;
            Box::new(BufWriter::new(f))
        }
        _ => Box::new(BufWriter::new(std::io::stdout().lock())),
    })
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let file = FileConfig::load(cli.config.as_deref())?;
    let sequential = file.or_flag(cli.sequential, "sequential")?;
    let mut env = Env {
        out: open_output(cli.output.as_ref())?,
        deterministic: file.or_flag(cli.deterministic, "deterministic")?,
        exec: if sequential { Exec::Sequential } else { Exec::Parallel },
        file,
    };
    match &cli.command {
        Command::Run(a) => commands::run(&mut env, a)?,
        Command::Simulate(a) => commands::simulate(&mut env, a)?,
        Command::Classify(a) => commands::classify(&mut env, a)?,
        Command::Report(a) => commands::report(&mut env, a)?,
        Command::Corpus(a) => commands::corpus(&mut env, a)?,
    }
    env.out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help and version go to stdout with status 0, real errors exit 2
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).parse_env("REVELIO_LOG").format_timestamp(None).init();

    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("revelio: {e:#}");
            eprintln!("Run `revelio --help` for usage.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("revelio: {e:#}");
            ExitCode::from(1)
        }
    }
}
