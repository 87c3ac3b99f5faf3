//! Command-line front end: `ractlab <kind> --config FILE [--out DIR]`.

pub mod config;
pub mod run;
pub mod table;

use std::path::PathBuf;

use clap::Parser;

use crate::error::Error;
pub use config::{ExperimentConfig, Kind};
pub use run::{run, RunManifest};

#[derive(Debug, Parser)]
#[command(name = "ractlab", version, about = "LoRA under label noise: sweeps and dual-rank noise detection")]
pub struct Args {
    /// Experiment to run.
    #[arg(value_enum)]
    pub kind: Kind,
    /// TOML experiment file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory (default: the config's `out`, else results/<kind>).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated seeds, overriding the config.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Worker threads, overriding the config.
    #[arg(long)]
    pub jobs: Option<usize>,
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Argument(_) | Error::Dimension(_) => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Consistency(_) => 3,
        Error::Numeric(_) => 4,
    }
}

/// Runs the CLI on parsed arguments and returns the manifest.
pub fn execute(args: &Args) -> crate::Result<RunManifest> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if let Some(jobs) = args.jobs {
        cfg.jobs = jobs;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| run::default_out(args.kind));
    run(args.kind, &cfg, &out)
}

/// Entry point shared by the binary and the tests. Returns the exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let args = match Args::try_parse_from(argv) {
        Ok(a) => a,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&args) {
        Ok(m) => {
            eprintln!(
                "ractlab {}: wrote {} in {:.1}s",
                m.kind,
                m.files.join(", "),
                m.duration_secs
            );
            0
        }
        Err(e) => {
            eprintln!("ractlab: error: {e}");
            exit_code(&e)
        }
    }
}
