use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use consensuslab::experiment::{
    cmd_analyze, cmd_simulate, cmd_verify, load_experiment, RunOptions, EXIT_OK, EXIT_USAGE, EXIT_VERIFY_FAILED,
};

#[derive(Parser)]
#[command(name = "consensuslab", version, about = "Consensus certificates and Monte Carlo checks for noisy multi-agent networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Certificates, gain intervals, rate and error bounds
    Analyze(Args),
    /// Monte Carlo ensemble with CSV output
    Simulate(Args),
    /// Simulate and compare against the analysis
    Verify(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    trials: Option<usize>,
}

fn run(cli: Cli) -> consensuslab::Result<i32> {
    let (Command::Analyze(a) | Command::Simulate(a) | Command::Verify(a)) = &cli.command;
    let opts = RunOptions { config_path: a.config.clone(), out: a.out.clone(), seed: a.seed, trials: a.trials };
    let (exp, out) = load_experiment(&opts)?;
    match cli.command {
        Command::Analyze(_) => {
            let r = cmd_analyze(&exp, &out)?;
            print!("{}", r.to_text());
            Ok(EXIT_OK)
        }
        Command::Simulate(_) => {
            let ens = cmd_simulate(&exp, &out)?;
            println!(
                "{} trials ({} diverged), outputs in {}",
                ens.trials,
                ens.divergence_count(),
                out.display()
            );
            Ok(EXIT_OK)
        }
        Command::Verify(_) => {
            let r = cmd_verify(&exp, &out)?;
            print!("{}", r.to_text());
            Ok(if r.passed() { EXIT_OK } else { EXIT_VERIFY_FAILED })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
