use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use moe_core::config::RunConfig;
use moe_core::run;
use moe_core::Error;

#[derive(Parser)]
#[command(name = "moe", version, about = "Train and analyse sparse mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from a config file into an output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Suppress per-eval progress lines.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint and export routing statistics.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Minimum number of validation tokens to route.
        #[arg(long, default_value_t = 65536)]
        tokens: usize,
        #[arg(long)]
        stats: PathBuf,
        /// Evaluation seed; defaults to the training seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate completed runs and their pairwise differences.
    Compare {
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the parameter breakdown of a config.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train { config, out, quiet } => RunConfig::load(&config).and_then(|cfg| {
            let report = run::train_command(&cfg, &out, |r| {
                if !quiet {
                    eprintln!(
                        "step {} task_loss {:.4} balance_loss {:.4} val_loss {:.4}",
                        r.step, r.task_loss, r.balance_loss, r.val_loss
                    );
                }
            })?;
            println!("val_loss {:.6}", report.val_loss);
            Ok(())
        }),
        Cmd::Eval {
            checkpoint,
            corpus,
            tokens,
            stats,
            seed,
        } => run::eval_command(&checkpoint, &corpus, tokens, &stats, seed).map(|r| {
            println!("val_loss {:.6}", r.val_loss);
            println!("tokens {}", r.tokens);
            println!("moe_layers {}", r.moe_layers);
        }),
        Cmd::Compare { runs, out } => run::compare_command(&runs, &out).map(|t| print!("{t}")),
        Cmd::Params { config } => RunConfig::load(&config).map(|cfg| print!("{}", run::params_report(&cfg.model))),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
