use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lsgvae_cli::commands::{self, CHECKPOINT_FILE};
use lsgvae_cli::config::CONFIG_FILE;
use lsgvae_cli::{exit_code, Overrides};
use lsgvae_core::Result;

#[derive(Parser)]
#[command(name = "lsgvae", version, about = "Location-scale Gaussian VAE forecasting runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic series with its ground-truth noise scale.
    Synth(Overrides),
    /// Train a model and write the best checkpoint.
    Train(Overrides),
    /// Evaluate a checkpoint on the test segment.
    Eval {
        #[command(flatten)]
        overrides: Overrides,
        /// Checkpoint to evaluate (default: <out>/checkpoint.json).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write per-step forecast quantiles from one origin.
    Forecast {
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// First forecast row (default: start of the test segment).
        #[arg(long)]
        origin: Option<usize>,
    },
    /// Compare the NLL model with the MSE-trained variant.
    Ablate(Overrides),
}

/// Without --config, eval and forecast reuse the config stored next to the
/// checkpoint.
fn checkpoint_run(o: &Overrides, checkpoint: &Option<PathBuf>) -> Result<(lsgvae_cli::RunConfig, PathBuf)> {
    let fallback = checkpoint
        .as_ref()
        .and_then(|p| p.parent())
        .map(|d| d.join(CONFIG_FILE));
    let cfg = o.resolve(fallback.as_deref())?;
    let path = checkpoint.clone().unwrap_or_else(|| cfg.out.join(CHECKPOINT_FILE));
    Ok((cfg, path))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(o) => {
            let out = commands::cmd_synth(&o.resolve(None)?)?;
            println!("{}", out.series.display());
        }
        Command::Train(o) => {
            let out = commands::cmd_train(&o.resolve(None)?)?;
            let best = out.report.best_val();
            println!(
                "best epoch {} val total {:.6} (rec {:.6} pred {:.6} kl {:.6})",
                out.report.best_epoch, best.total, best.rec_nll, best.pred_nll, best.kl
            );
            println!("{}", out.checkpoint_path.display());
        }
        Command::Eval { overrides, checkpoint } => {
            let (cfg, path) = checkpoint_run(&overrides, &checkpoint)?;
            let r = commands::cmd_eval(&cfg, &path)?;
            println!("crps {:.6}", r.crps);
            println!("nmae {:.6}", r.nmae);
            println!("qice {:.6}", r.qice);
            if let Some(rho) = r.volatility_rho {
                println!("volatility_rho {rho:.6}");
            }
        }
        Command::Forecast {
            overrides,
            checkpoint,
            origin,
        } => {
            let (cfg, path) = checkpoint_run(&overrides, &checkpoint)?;
            commands::cmd_forecast(&cfg, &path, origin)?;
            println!("{}", cfg.out.join(commands::FORECAST_FILE).display());
        }
        Command::Ablate(o) => {
            println!("{:<12} {:>10} {:>10} {:>10}", "variant", "crps", "nmae", "qice");
            for r in commands::cmd_ablate(&o.resolve(None)?)? {
                println!("{:<12} {:>10.6} {:>10.6} {:>10.6}", r.variant, r.crps, r.nmae, r.qice);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("LSG_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
