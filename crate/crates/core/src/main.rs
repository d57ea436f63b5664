use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asynctb::cli;

/// Desk-scale off-policy RL trainer with exact-enumeration verification.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a training spec and write metrics, snapshot, and summary.
    Train {
        /// TOML run spec; missing keys take documented defaults.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (created if absent).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a verification suite and print pass/fail per property.
    Verify {
        /// One of: gradcheck, equivalence, posterior, buffer, throughput.
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample sequences from a saved parameter snapshot.
    Sample {
        /// Snapshot file written by `train` (params.txt).
        #[arg(long)]
        snapshot: PathBuf,
        /// Instance name: tiny, mr_like, or rt_like.
        #[arg(long)]
        instance: String,
        /// Number of sequences to draw.
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Train { spec, out } => cli::cmd_train(&spec, &out),
        Command::Verify { suite, seed } => cli::cmd_verify(&suite, seed),
        Command::Sample {
            snapshot,
            instance,
            n,
            seed,
        } => cli::cmd_sample(&snapshot, &instance, n, seed),
    };
    ExitCode::from(code as u8)
}
