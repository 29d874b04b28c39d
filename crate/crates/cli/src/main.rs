use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "spsn", version, about = "RGB-D salient object detection with superpixel prototype sampling")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Where the model configuration comes from.
#[derive(Args, Clone, Debug)]
pub struct ConfigArgs {
    /// JSON config; keys not given take their defaults.
    #[arg(long, conflicts_with = "preset")]
    pub config: Option<PathBuf>,
    /// Built-in profile: default, desk or desk64.
    #[arg(long)]
    pub preset: Option<String>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

/// A training set read from disk or generated on the fly.
#[derive(Args, Clone, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["data", "synthetic"])))]
pub struct DataArgs {
    /// Directory with rgb/, depth/ and gt/ subdirectories.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Generate this many synthetic samples instead.
    #[arg(long)]
    pub synthetic: Option<usize>,
    /// Seed of the synthetic generator; defaults to the config seed.
    #[arg(long)]
    pub synth_seed: Option<u64>,
    /// Probability that a synthetic depth map is degraded.
    #[arg(long, default_value_t = 0.0)]
    pub depth_degrade: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-step loss CSV.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Loss CSV path; defaults to the checkpoint path with a `.loss.csv` extension.
        #[arg(long)]
        loss_csv: Option<PathBuf>,
    },
    /// Predict a saliency mask for one RGB-D pair.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        depth: PathBuf,
        /// 8-bit mask at the RGB image's resolution.
        #[arg(long)]
        out: PathBuf,
        /// Write intermediate maps, scores and reliance weights here.
        #[arg(long)]
        dump_debug: Option<PathBuf>,
    },
    /// Score a checkpoint on a labelled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-image CSV report with a trailing mean row.
        #[arg(long)]
        report: PathBuf,
        /// Precision-recall curve CSV.
        #[arg(long)]
        pr: Option<PathBuf>,
        /// Per-sample debug maps, one subdirectory each.
        #[arg(long)]
        dump_debug: Option<PathBuf>,
    },
    /// Write a synthetic RGB-D dataset.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.0)]
        depth_degrade: f64,
        /// Side length in pixels.
        #[arg(long, default_value_t = 96)]
        size: usize,
    },
    /// Segment an image and render the labels.
    Superpixels {
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 100)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        /// Treat the image as a depth map.
        #[arg(long)]
        depth: bool,
        #[arg(long, default_value_t = 10.0)]
        compactness: f32,
        #[arg(long, default_value_t = 10)]
        iterations: usize,
    },
    /// Train and evaluate one model per superpixel count.
    Ablate {
        /// Comma-separated superpixel counts.
        #[arg(long, value_delimiter = ',', required = true)]
        ns: Vec<usize>,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        data: DataArgs,
        /// Held-out directory; defaults to fresh synthetic samples.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        /// Size of the synthetic held-out set.
        #[arg(long, default_value_t = 16)]
        eval_synthetic: usize,
        /// Output directory for ablation.csv and ablation.png.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, data, out, loss_csv } => commands::train(&config, &data, &out, loss_csv),
        Command::Infer { ckpt, rgb, depth, out, dump_debug } => {
            commands::infer(&ckpt, &rgb, &depth, &out, dump_debug.as_deref())
        }
        Command::Eval { ckpt, data, report, pr, dump_debug } => {
            commands::eval(&ckpt, &data, &report, pr.as_deref(), dump_debug.as_deref())
        }
        Command::Synth { n, out, seed, depth_degrade, size } => commands::synth(n, &out, seed, depth_degrade, size),
        Command::Superpixels { image, n, out, depth, compactness, iterations } => {
            commands::superpixels(&image, n, &out, depth, compactness, iterations)
        }
        Command::Ablate { ns, config, data, eval_data, eval_synthetic, out } => {
            commands::ablate(&ns, &config, &data, eval_data.as_deref(), eval_synthetic, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
