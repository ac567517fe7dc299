//! Federated sequential-recommendation simulator.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use pfsr_core::cli;
use pfsr_core::config::RunConfig;
use pfsr_core::error::Error;

type CommandFn = fn(&RunConfig) -> Result<(), Error>;

#[derive(Parser)]
#[command(
    name = "pfsr",
    about = "Federated sequential recommendation simulator",
    after_help = "Trailing arguments of the form `--key value` override config keys;\n\
                  run with a config file via --config. Unknown keys are rejected."
)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the processed dataset cache and print corpus statistics.
    Prep(CommonArgs),
    /// Run federated training and emit logs, metrics, and checkpoints.
    Train(CommonArgs),
    /// Evaluate a saved checkpoint over all users.
    Eval(CommonArgs),
    /// Verify analytic gradients against finite differences.
    Gradcheck(CommonArgs),
}

#[derive(clap::Args)]
struct CommonArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--key value` pairs overriding config keys.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

fn parse_overrides(raw: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    let mut iter = raw.iter();
    while let Some(item) = iter.next() {
        let Some(key) = item.strip_prefix("--") else {
            return Err(Error::Config(format!("expected --key, got {item:?}")));
        };
        let Some(value) = iter.next() else {
            return Err(Error::Config(format!("missing value for --{key}")));
        };
        out.push((key.to_string(), value.clone()));
    }
    Ok(out)
}

fn run(args: Args) -> Result<(), Error> {
    let (common, run_fn): (&CommonArgs, CommandFn) = match &args.command {
        Command::Prep(c) => (c, cli::cmd_prep),
        Command::Train(c) => (c, cli::cmd_train),
        Command::Eval(c) => (c, cli::cmd_eval),
        Command::Gradcheck(c) => (c, cli::cmd_gradcheck),
    };
    let overrides = parse_overrides(&common.overrides)?;
    let cfg = RunConfig::from_sources(common.config.as_deref(), &overrides)?;
    run_fn(&cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(cli::exit_code(&err) as u8)
        }
    }
}
