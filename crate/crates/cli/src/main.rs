use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use kldd_cli::commands::{cmd_eval, cmd_gen_data, cmd_segment, cmd_train, cmd_viz_rf, parse_positions};
use kldd_cli::{init_threads, Checkpoint, Result, RunConfig};

/// Kalman-smoothed linear deformable diffusion for vessel segmentation.
#[derive(Parser)]
#[command(name = "kldd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic vessel dataset with train/ and val/ splits.
    GenData {
        #[arg(long, default_value_t = 200)]
        n_train: usize,
        #[arg(long, default_value_t = 20)]
        n_val: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes loss.csv and checkpoint.kldd to out_dir.
    Train {
        /// Config file of key=value lines.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from a checkpoint; its config is the starting point.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override one config key, e.g. `--set lr=0.001`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Sample probability maps and masks for every image of a folder.
    Segment {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Override a sampling key (seed, ensemble, threshold, patch, stride).
        #[arg(long = "set", value_name = "KEY=VALUE")]
        sets: Vec<String>,
    },
    /// Compare predictions with ground truth; writes metrics.csv.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export deformable tap coordinates at chosen pixels.
    VizRf {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Pixels as `row,col;row,col`.
        #[arg(long)]
        positions: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match cli.command {
        Command::GenData { n_train, n_val, size, seed, out } => cmd_gen_data(n_train, n_val, size, seed, &out),
        Command::Train { config, resume, sets } => {
            let ck = resume.as_deref().map(Checkpoint::load).transpose()?;
            let mut cfg = match (&ck, &config) {
                (Some(ck), None) => ck.config.clone(),
                (_, Some(path)) => RunConfig::load(path)?,
                (None, None) => RunConfig::default(),
            };
            cfg.apply_overrides(&sets)?;
            let out = cmd_train(&cfg, ck)?;
            println!("trained to step {} (epoch {}), checkpoint {}", out.step, out.epoch, out.checkpoint.display());
            Ok(())
        }
        Command::Segment { checkpoint, input, out, sets } => {
            let mut cfg = Checkpoint::load(&checkpoint)?.config;
            cfg.apply_overrides(&sets)?;
            let ids = cmd_segment(&checkpoint, &cfg, &input, &out)?;
            println!("segmented {} images into {}", ids.len(), out.display());
            Ok(())
        }
        Command::Eval { pred, gt, out } => {
            let report = cmd_eval(&pred, &gt, out.as_deref())?;
            println!("{}", report.aggregate);
            Ok(())
        }
        Command::VizRf { checkpoint, image, positions, out } => {
            let rows = cmd_viz_rf(&checkpoint, &image, &parse_positions(&positions)?, &out)?;
            println!("wrote {} tap coordinates to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
