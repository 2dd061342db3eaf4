//! `moe-upcycle`: upcycle checkpoints, plan parallel layouts, train and
//! evaluate toy models, run ablations and count FLOPs.
//!
//! Exit codes: 0 ok, 2 config, 3 I/O, 4 verification failure, 5 folding
//! check failure, 6 numeric abort.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use moe_upcycle::moe::{CapacityFactor, RouterType};
use moe_upcycle::plan::FlopConvention;

use config::RunConfig;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            code: 2,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<moe_upcycle::Error> for CliError {
    fn from(e: moe_upcycle::Error) -> Self {
        use moe_upcycle::Error as E;
        let code = match &e {
            E::Config(_) | E::Input(_) | E::Plan(_) | E::InvalidGate(_) | E::Shape { .. } => 2,
            E::NonFiniteLoss { .. } | E::OracleInvalid(_) => 6,
            _ => 3,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "moe-upcycle",
    version,
    about = "Dense-to-MoE upcycling toolkit"
)]
struct Cli {
    /// TOML run config; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Output directory; overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert a dense checkpoint to an MoE checkpoint, whole or per shard.
    Upcycle(UpcycleArgs),
    /// Validate a parallel plan and report groups, communication, memory and FLOPs.
    Plan(PlanArgs),
    /// Train a dense or upcycled model on the synthetic blend.
    Train(TrainArgs),
    /// Perplexity of a checkpoint on held-out synthetic data.
    Eval(EvalArgs),
    /// One training run per capacity factor or router type.
    Ablate(AblateArgs),
    /// Parameter and FLOP counts, dense versus MoE.
    Flops(FlopsArgs),
    /// Print the effective config with defaults filled in.
    PrintConfig,
}

#[derive(Debug, Args)]
pub struct UpcycleArgs {
    /// Dense checkpoint directory.
    #[arg(long)]
    pub dense: Option<PathBuf>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub router: Option<RouterType>,
    /// Capacity factor or `dropless`.
    #[arg(long)]
    pub cf: Option<CapacityFactor>,
    /// Comma-separated MoE layers.
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    #[arg(long)]
    pub tp: Option<usize>,
    #[arg(long)]
    pub ep: Option<usize>,
    /// Check the written result against whole-model upcycling.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// TOML file holding the plan fields; `[plan]` of the config otherwise.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    /// Fail with exit 5 unless every group of these kinds stays in one node.
    #[arg(long, value_delimiter = ',')]
    pub check_folding: Option<Vec<String>>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Starting checkpoint (dense or MoE); a fresh dense init otherwise.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Upcycle a dense start with the gate config before training.
    #[arg(long)]
    pub moe: bool,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub batches: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// `cf` or `router_type`.
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated values, e.g. `1,2,4,dropless` or `mixtral,st`.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// `llama3-8b` or `toy`.
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub tokens: Option<usize>,
    #[arg(long)]
    pub experts: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// `2P` or `6P`.
    #[arg(long)]
    pub convention: Option<FlopConvention>,
    /// Leave out the attention score and value products.
    #[arg(long)]
    pub no_attention: bool,
}

/// Global settings shared by every command.
pub struct Globals {
    pub config: RunConfig,
    pub force: bool,
    /// `--out` or `out` from the config, if either was given.
    pub out: Option<PathBuf>,
}

fn command_with_keys() -> clap::Command {
    let mut cmd = Cli::command();
    for name in [
        "upcycle",
        "plan",
        "train",
        "eval",
        "ablate",
        "flops",
        "print-config",
    ] {
        let keys = RunConfig::keys_for(name);
        cmd = cmd.mut_subcommand(name, |c| {
            c.after_help(format!(
                "Config keys (TOML, values shown are examples):\n\n{keys}"
            ))
        });
    }
    cmd
}

fn run() -> Result<(), CliError> {
    let matches = command_with_keys().get_matches();
    let cli = Cli::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());
    let mut config = match &cli.config {
        Some(path) => {
            if !path.exists() {
                return Err(CliError::io(format!(
                    "config file not found: {}",
                    path.display()
                )));
            }
            RunConfig::load(path)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if cli.out.is_some() {
        config.out = cli.out.clone();
    }
    let globals = Globals {
        out: config.out.clone(),
        config,
        force: cli.force,
    };
    match cli.command {
        Command::Upcycle(a) => commands::upcycle(&globals, a),
        Command::Plan(a) => commands::plan(&globals, a),
        Command::Train(a) => commands::train(&globals, a),
        Command::Eval(a) => commands::eval(&globals, a),
        Command::Ablate(a) => commands::ablate(&globals, a),
        Command::Flops(a) => commands::flops(&globals, a),
        Command::PrintConfig => {
            print!("{}", globals.config.resolved().to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
