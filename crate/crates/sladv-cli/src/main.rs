//! `sladv`: train split models, attack them, and report the results.
//!
//! A run directory (`--out`) accumulates the artifacts of one experiment:
//!
//! ```text
//! out/
//!   config.json        echo of the effective config
//!   checkpoints/       theta1/theta2/theta3 (.slnn), shadow.slnn if malicious
//!   metrics.csv        per-round task loss and L_sim
//!   report.json        attack evaluation (written by `attack`)
//!   probe_report.json  theory probes (written by `probe`)
//!   adv/               adversarial dumps (written by `attack`)
//!   sweep.csv          alpha sweep table (written by `sweep`)
//! ```
//!
//! Exit codes: 0 ok, 2 bad config, 3 IO or file-format failure, 4 missing
//! artifact (run `train` first).

mod run;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sladv", version, about = "Split-learning attack bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a split model (honest or malicious server); write checkpoints
    /// and per-round metrics.
    Train(RunArgs),
    /// Craft adversarial inputs against trained checkpoints; write
    /// report.json and adversarial dumps.
    Attack(RunArgs),
    /// Compute the theory probes for trained checkpoints.
    Probe(RunArgs),
    /// Train and attack across the alpha grid; write sweep.csv.
    Sweep(RunArgs),
    /// Summarize the artifacts in a run directory.
    Report(ReportArgs),
}

#[derive(Args)]
pub(crate) struct RunArgs {
    /// Experiment config file (JSON).
    #[arg(long, value_name = "PATH", conflicts_with = "preset")]
    pub(crate) config: Option<PathBuf>,
    /// Built-in config: "desk" or "paper-desk".
    #[arg(long, value_name = "NAME")]
    pub(crate) preset: Option<String>,
    /// Overrides the config's seed.
    #[arg(long, value_name = "N")]
    pub(crate) seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, value_name = "DIR", default_value = "sladv-run")]
    pub(crate) out: PathBuf,
}

#[derive(Args)]
pub(crate) struct ReportArgs {
    /// Run directory to summarize.
    #[arg(long, value_name = "DIR", default_value = "sladv-run")]
    pub(crate) out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => run::cmd_train(args),
        Command::Attack(args) => run::cmd_attack(args),
        Command::Probe(args) => run::cmd_probe(args),
        Command::Sweep(args) => run::cmd_sweep(args),
        Command::Report(args) => run::cmd_report(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sladv: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
