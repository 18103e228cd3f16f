use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use eqfree_cli::{load_config, parse_config, run, CliError, Command};

/// Exit status when a branch or curve was cut short by corrector failure.
const EXIT_TRUNCATED: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "eqfree", version, about = "Equation-free bifurcation studies of the ring-road traffic model")]
struct Args {
    command: Command,
    /// Key-value config file; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides `out` in the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides `threads` in the config).
    #[arg(long)]
    threads: Option<usize>,
    /// Allow v0 and h outside the standard parameter envelope.
    #[arg(long = "unsafe")]
    unsafe_ranges: bool,
}

fn execute(args: &Args) -> Result<bool, CliError> {
    let mut config = match &args.config {
        Some(path) => load_config(path, args.command).or_else(|e| match e {
            // Envelope errors may be lifted by --unsafe, so re-validate below.
            CliError::Invalid { .. } if args.unsafe_ranges => {
                let text = std::fs::read_to_string(path).map_err(|source| CliError::Io {
                    path: path.clone(),
                    source,
                })?;
                parse_config(&text, args.command)
            }
            other => Err(other),
        })?,
        None => parse_config("", args.command)?,
    };
    config.unsafe_ranges = args.unsafe_ranges;
    if let Some(out) = &args.out {
        config.out = out.clone();
    }
    if args.threads.is_some() {
        config.threads = args.threads;
    }
    config.validate()?;
    if let Some(n) = config.threads {
        // Ignore the error if a pool was already installed.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let summary = run(&config)?;
    for f in &summary.files {
        println!("{}", config.out.join(f).display());
    }
    Ok(summary.truncated)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => {
            eprintln!("{}", serde_json::json!({ "warning": "truncated", "message": "partial results written" }));
            ExitCode::from(EXIT_TRUNCATED)
        }
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
