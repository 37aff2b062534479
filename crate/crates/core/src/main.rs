use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use ficabu_core::cau::UnlearnMode;
use ficabu_core::error::Result;
use ficabu_core::harness::commands::{
    cmd_importance, cmd_report, cmd_simulate, cmd_sweep, cmd_train, cmd_unlearn, Layout,
};
use ficabu_core::harness::config::ExperimentConfig;

#[derive(Parser)]
#[command(name = "ficabu", version, about = "Selective-dampening unlearning experiments")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(short, long, global = true, default_value = "ficabu.toml")]
    config: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the model and write model.fcbm.
    Train,
    /// Estimate the global importance map.
    Importance {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Unlearn the forget class.
    Unlearn {
        /// ssd_full, cau or cau_balanced (default: the config's mode).
        #[arg(long)]
        mode: Option<UnlearnMode>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        importance: Option<PathBuf>,
    },
    /// Simulate an outcome on the accelerator and on the no-IP baseline.
    Simulate {
        #[arg(long)]
        outcome: Option<PathBuf>,
    },
    /// Assemble the baseline/SSD/ours table.
    Report,
    /// Run the whole experiment for a range of seeds.
    Sweep {
        #[arg(long, default_value_t = 0)]
        from: u64,
        #[arg(long, default_value_t = 10)]
        count: u64,
    },
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = ExperimentConfig::load(&cli.config)?;
    match cli.command {
        Command::Train => {
            let r = cmd_train(&cfg)?;
            println!("train_acc {:.4} test_acc {:.4}", r.train_acc, r.test_acc);
            println!("wrote {}", Layout::new(&cfg).model().display());
        }
        Command::Importance { model } => {
            let map = cmd_importance(&cfg, model.as_deref())?;
            println!("{} layers over {} samples", map.depth(), map.sample_count);
            println!("wrote {}", Layout::new(&cfg).importance().display());
        }
        Command::Unlearn { mode, model, importance } => {
            let mode = mode.unwrap_or(cfg.unlearn.mode);
            let r = cmd_unlearn(&cfg, mode, model.as_deref(), importance.as_deref())?;
            let o = &r.eval.outcome;
            println!(
                "{mode}: stop layer {} of {} early_stop {} macs {:.2}% of ssd",
                o.stop_layer, o.depth, o.early_stop, o.ledger.ratio_vs_ssd
            );
            println!("retain_acc {:.4} forget_acc {:.4}", r.eval.accuracy.retain_acc, r.eval.accuracy.forget_acc);
            if let Some(c) = &r.comparison {
                print!("{}", c.to_table());
            }
        }
        Command::Simulate { outcome } => {
            let r = cmd_simulate(&cfg, outcome.as_deref())?;
            print!("{}", r.ficabu.to_text());
            println!("no-IP baseline {} cycles, {:.6} mJ", r.baseline.cycles, r.baseline.energy.total_mj);
        }
        Command::Report => print!("{}", cmd_report(&cfg)?.table),
        Command::Sweep { from, count } => print_json(&cmd_sweep(&cfg, from..from + count)?)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", json!({ "error": e.kind(), "message": e.to_string() }));
            ExitCode::FAILURE
        }
    }
}
