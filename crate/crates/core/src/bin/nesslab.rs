use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nesslab::config::Overrides;
use nesslab::runner;

#[derive(Parser)]
#[command(name = "nesslab", version, about = "Run lattice energy-exchange experiments from a TOML config")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment and write `<prefix>.csv` and `<prefix>.json`.
    Run {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
    /// Check the config and print it with all defaults resolved.
    Validate {
        config: PathBuf,
        #[command(flatten)]
        overrides: OverrideArgs,
    },
}

#[derive(Args)]
struct OverrideArgs {
    /// Seed override; any 64-bit value, negative numbers allowed.
    #[arg(long, allow_negative_numbers = true, value_parser = parse_seed)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Worker threads (0 = all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn parse_seed(s: &str) -> Result<u64, String> {
    s.parse::<u64>()
        .or_else(|_| s.parse::<i64>().map(|v| v as u64))
        .map_err(|_| format!("`{s}` is not a 64-bit integer"))
}

impl From<OverrideArgs> for Overrides {
    fn from(a: OverrideArgs) -> Self {
        Overrides {
            seed: a.seed,
            replicas: a.replicas,
            out_dir: a.out_dir,
            threads: a.threads,
        }
    }
}

fn main() -> ExitCode {
    let result = match Cli::parse().command {
        Command::Run { config, overrides } => runner::run(&config, &overrides.into()).map(|out| {
            println!("{}", out.csv_path.display());
            println!("{}", out.json_path.display());
        }),
        Command::Validate { config, overrides } => runner::validate(&config, &overrides.into()).map(|v| {
            println!("{}", serde_json::to_string_pretty(&v).expect("validation serializes"));
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", runner::error_payload(&e));
            ExitCode::from(if e.kind() == "ConfigInvalid" { 2 } else { 1 })
        }
    }
}
