//! `vrl`: train Mixup-family models and evaluate accuracy, calibration,
//! OOD detection, feature separability and entropy profiles.

mod commands;
mod config;
mod error;
mod manifest;
mod pool;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use vrl_core::trainer::Strategy;

use crate::commands::Ctx;
use crate::error::CliError;
use crate::manifest::Manifest;

#[derive(Parser, Debug)]
#[command(name = "vrl", version, about = "Mixup-family training and uncertainty evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config file (repeat for `compare`).
    #[arg(long, global = true)]
    config: Vec<PathBuf>,
    /// Root output directory; runs go to `<out>/<config hash>/`.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    /// Number of seeds, overriding the config.
    #[arg(long, global = true)]
    seeds: Option<usize>,
    /// Worker threads (ignored when VRL_DETERMINISTIC=1).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train every strategy × seed and write records and checkpoints.
    Train {
        /// Store wall-clock seconds in each record (makes records non-reproducible).
        #[arg(long)]
        timing: bool,
    },
    /// Accuracy, ECE and AdaECE on clean and corrupted test sets.
    Eval {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// OOD-detection AUROC for every uncertainty measure.
    Ood {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Temperature scaling fitted on validation data.
    Calibrate {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Entropy-profile heatmaps and barrier statistics.
    Heatmap {
        #[arg(long)]
        records: Option<PathBuf>,
        #[arg(long)]
        strategy: Option<Strategy>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fisher criterion per corruption kind and intensity.
    Fisher {
        #[arg(long)]
        records: Option<PathBuf>,
    },
    /// Seed-mean ± stddev summary across one or more configs.
    Compare,
}

fn single(cli: &Cli) -> Result<Manifest, CliError> {
    match cli.config.as_slice() {
        [one] => Manifest::load(one, cli.seeds),
        [] => Err(CliError::Usage("--config is required".into())),
        _ => Err(CliError::Usage("this command takes exactly one --config".into())),
    }
}

fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let records = match &cli.command {
        Command::Eval { records }
        | Command::Ood { records }
        | Command::Calibrate { records }
        | Command::Heatmap { records, .. }
        | Command::Fisher { records } => records.clone(),
        Command::Train { .. } | Command::Compare => None,
    };
    let ctx = Ctx {
        out: cli.out.clone(),
        workers: pool::worker_count(cli.jobs),
        records,
    };
    Ok(match &cli.command {
        Command::Train { timing } => commands::cmd_train(&single(cli)?, &ctx, *timing)?,
        Command::Eval { .. } => vec![commands::cmd_eval(&single(cli)?, &ctx)?],
        Command::Ood { .. } => vec![commands::cmd_ood(&single(cli)?, &ctx)?],
        Command::Calibrate { .. } => vec![commands::cmd_calibrate(&single(cli)?, &ctx)?],
        Command::Heatmap { strategy, seed, .. } => {
            vec![commands::cmd_heatmap(&single(cli)?, &ctx, *strategy, *seed)?]
        }
        Command::Fisher { .. } => vec![commands::cmd_fisher(&single(cli)?, &ctx)?],
        Command::Compare => {
            if cli.config.is_empty() {
                return Err(CliError::Usage("compare needs at least one --config".into()));
            }
            let manifests = cli
                .config
                .iter()
                .map(|p| Manifest::load(p, cli.seeds))
                .collect::<Result<Vec<_>, _>>()?;
            vec![commands::cmd_compare(&manifests, &ctx)?]
        }
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("vrl: {e}");
            e.exit_code()
        }
    }
}
