mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use acvae::data::InputFormat;

#[derive(Parser)]
#[command(name = "acvae", version, about = "Sequential VAE recommender: preprocess, train, evaluate, diagnose")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

fn parse_format(s: &str) -> Result<InputFormat, String> {
    s.parse().map_err(|e: acvae::Error| e.to_string())
}

/// Options shared by every command that trains.
#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Preprocessed dataset cache.
    #[arg(long)]
    pub data: PathBuf,
    /// Built-in defaults: ml-latest, ml-1m, ml-10m, yelp.
    #[arg(long)]
    pub preset: Option<String>,
    /// Sectioned key=value config applied after the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Extra `section.key=value` overrides.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Evaluate every N epochs (0 = only at the end).
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Switches such as `no_avb` or `no_avb+no_cnn`.
    #[arg(long)]
    pub ablation: Option<String>,
    #[arg(long, value_enum, default_value = "f64")]
    pub precision: Precision,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Write a checkpoint every N epochs.
    #[arg(long, default_value_t = 1)]
    pub checkpoint_every: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Parse, binarize, k-core filter and split an interaction log.
    Preprocess {
        #[arg(long)]
        input: PathBuf,
        /// movielens_dat, csv or yelp_json.
        #[arg(long, value_parser = parse_format)]
        format: InputFormat,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        min_core: usize,
        /// Overrides --min-core for users.
        #[arg(long)]
        min_user: Option<usize>,
        /// Overrides --min-core for items.
        #[arg(long)]
        min_item: Option<usize>,
        #[arg(long, default_value_t = 3.0)]
        threshold: f64,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the held-out suffixes.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
        ks: Vec<usize>,
        /// Keep training items in the ranking.
        #[arg(long)]
        include_train: bool,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Train the full model and each ablation variant.
    Ablate {
        #[command(flatten)]
        args: TrainArgs,
        /// Variant to run; repeat for several. Defaults to full and the three single ablations.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// Grid search over alpha and beta.
    Sweep {
        #[command(flatten)]
        args: TrainArgs,
        /// `alpha=0,0.05,0.1 beta=0,0.5`; may be repeated.
        #[arg(long, num_args = 1..)]
        grid: Vec<String>,
    },
    /// Latent correlation diagnostic for a checkpoint.
    Corr {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Pool latents from this many random users (all by default).
        #[arg(long)]
        sample_users: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Two-dimensional toy: analytic KL against a learned discriminator.
    ToyDemo {
        #[arg(long, default_value_t = 0.4)]
        sigma: f64,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Preprocess {
            input,
            format,
            out,
            min_core,
            min_user,
            min_item,
            threshold,
        } => commands::preprocess(&input, format, &out, min_user.unwrap_or(min_core), min_item.unwrap_or(min_core), threshold),
        Command::Train { args, resume } => commands::train(&args, resume.as_deref()),
        Command::Evaluate {
            checkpoint,
            data,
            ks,
            include_train,
            out_dir,
        } => commands::evaluate(&checkpoint, &data, &ks, !include_train, out_dir.as_deref()),
        Command::Ablate { args, variants } => commands::ablate(&args, &variants),
        Command::Sweep { args, grid } => commands::sweep(&args, &grid),
        Command::Corr {
            checkpoint,
            data,
            sample_users,
            seed,
            out_dir,
        } => commands::corr(&checkpoint, &data, sample_users, seed, out_dir.as_deref()),
        Command::ToyDemo {
            sigma,
            n,
            seed,
            steps,
            out_dir,
        } => commands::toy_demo(sigma, n, seed, steps, out_dir.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
