use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use maskpolicy_cli::commands;
use maskpolicy_cli::config::{ConfigError, RunConfig};
use serde_json::{json, Value};

/// Decision-based masked image modeling on synthetic EM-like volumes.
#[derive(Parser, Debug)]
#[command(name = "maskpolicy", version, about)]
struct Cli {
    /// JSON run config; omitted keys take their defaults, unknown keys are
    /// rejected. MASKPOLICY_SEED overrides every seed in it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the training and held-out phantoms with their label volumes.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-phase pretraining: policy and target model, then target model only.
    Pretrain {
        /// Run directory for logs, checkpoints and the echoed config.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fixed-ratio MAE baseline for each given ratio, with the same iteration budget.
    PretrainFixed {
        /// Masking ratios in (0, 1); repeat the flag or separate with commas.
        #[arg(long, required = true, value_delimiter = ',')]
        ratio: Vec<f64>,
        /// Ratios trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Parent directory; each ratio gets `ratio_<r>/`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the linear affinity probe on a frozen encoder and score the held-out set.
    Probe {
        /// Run directory whose `checkpoints/target` is loaded.
        #[arg(long, required_unless_present = "random_init", conflicts_with = "random_init")]
        run: Option<PathBuf>,
        /// Use a randomly initialized encoder instead of a checkpoint.
        #[arg(long)]
        random_init: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Watershed fragments plus agglomeration of an affinity volume.
    Segment {
        /// Affinity `.vol` file.
        #[arg(long)]
        affinity: PathBuf,
        /// Output labels `.vol`; merges go to `<stem>_merges.jsonl`.
        #[arg(long)]
        out: PathBuf,
    },
    /// VOI and ARAND of a predicted labeling against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// Append a result row to this CSV file.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Finite-difference gradient checks of every trained model.
    Gradcheck {
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-6)]
        tol: f64,
    },
    /// Render a run's masking-ratio trajectory as SVG and CSV.
    RatioPlot {
        #[arg(long)]
        run: PathBuf,
        /// Output directory; defaults to the run directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Trailing window used for the reported mean and std.
        #[arg(long, default_value_t = 200)]
        window: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<(bool, Value)> {
    if let Command::Gradcheck { tol } = cli.command {
        return commands::gradcheck_cmd(tol);
    }
    let cfg = RunConfig::load(cli.config.as_deref())?;
    let out = match cli.command {
        Command::GenData { out } => commands::gen_data(&cfg, &out)?,
        Command::Pretrain { out } => commands::pretrain_cmd(&cfg, &out)?,
        Command::PretrainFixed { ratio, jobs, out } => commands::pretrain_fixed(&cfg, &out, &ratio, jobs)?,
        Command::Probe {
            run,
            random_init: _,
            out,
        } => commands::probe_cmd(&cfg, run.as_deref(), &out)?,
        Command::Segment { affinity, out } => commands::segment_cmd(&cfg, &affinity, &out)?,
        Command::Evaluate { pred, gt, csv } => {
            serde_json::to_value(commands::evaluate_cmd(&cfg, &pred, &gt, csv.as_deref())?)?
        }
        Command::RatioPlot { run, out, window } => {
            let out = out.unwrap_or_else(|| run.clone());
            commands::ratio_plot(&run, &out, window)?
        }
        Command::Gradcheck { .. } => unreachable!(),
    };
    Ok((true, out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok((ok, value)) => {
            println!("{value}");
            if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            }
        }
        Err(e) => {
            let violations = e
                .downcast_ref::<ConfigError>()
                .map_or_else(Vec::new, |c| c.violations.clone());
            eprintln!("{}", json!({ "error": format!("{e:#}"), "violations": violations }));
            ExitCode::FAILURE
        }
    }
}
