use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use msedf::cli;
use msedf::stacking::StackStrategy;

/// Multi-stream encoder-decoder image captioner.
///
/// JSON results go to stdout, diagnostics to stderr. Exit codes: 0 ok,
/// 1 domain error, 2 usage error.
#[derive(Parser)]
#[command(name = "msedf", version)]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a JSON config; writes the best checkpoint and a history file.
    Train {
        /// Path to the run config (JSON).
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. --set train.max_epochs=20
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Score a checkpoint on the dataset's test split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        features_a: PathBuf,
        #[arg(long)]
        features_b: PathBuf,
        /// Vocabulary frequency threshold used when the dataset was built.
        #[arg(long, default_value_t = 1)]
        min_count: usize,
        /// Decode greedily instead of with beam search.
        #[arg(long, conflicts_with = "beam")]
        greedy: bool,
        /// Beam width.
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Rerank beam hypotheses against similar training images.
        #[arg(long)]
        rerank: bool,
        /// Neighbors used by reranking.
        #[arg(long, default_value_t = 4)]
        k_similar: usize,
        /// Decode length cap (default: dataset caption length + 2).
        #[arg(long)]
        max_len: Option<usize>,
        /// Also write per-image captions to this JSON file.
        #[arg(long, value_name = "PATH")]
        per_image: Option<PathBuf>,
    },
    /// Caption a single image.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features_a: PathBuf,
        #[arg(long)]
        features_b: PathBuf,
        #[arg(long)]
        image_id: String,
        /// Caption file providing the training pool for reranking.
        #[arg(long)]
        captions: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        #[arg(long, default_value_t = 20)]
        max_len: usize,
        #[arg(long, default_value_t = 4)]
        k_similar: usize,
        #[arg(long)]
        rerank: bool,
    },
    /// Train and evaluate a strategy-by-depth grid.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// Comma-separated stacking strategies (ss,cs,gws,lws).
        #[arg(long, default_value = "ss,cs,gws,lws")]
        strategies: String,
        /// Comma-separated depths.
        #[arg(long, default_value = "1,2,3")]
        depths: String,
    },
    /// Finite-difference check of the full training gradient on tiny models.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Generate a synthetic dataset (captions + two feature files).
    Synth {
        /// Synthetic spec (JSON); defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

fn run(args: Args) -> msedf::Result<()> {
    match args.command {
        Command::Train { config, set } => {
            let config = cli::load_config(&config, &set)?;
            cli::cmd_train(&config)?;
        }
        Command::Evaluate {
            checkpoint,
            captions,
            features_a,
            features_b,
            min_count,
            greedy,
            beam,
            rerank,
            k_similar,
            max_len,
            per_image,
        } => {
            cli::cmd_evaluate(&cli::EvaluateArgs {
                checkpoint,
                captions,
                features_a,
                features_b,
                min_count,
                greedy,
                beam_width: beam,
                rerank,
                k_similar,
                max_len,
                per_image,
            })?;
        }
        Command::Caption {
            checkpoint,
            features_a,
            features_b,
            image_id,
            captions,
            beam,
            max_len,
            k_similar,
            rerank,
        } => {
            cli::cmd_caption(&cli::CaptionArgs {
                checkpoint,
                captions,
                features_a,
                features_b,
                image_id,
                beam_width: beam,
                max_len,
                k_similar,
                rerank,
            })?;
        }
        Command::Ablate {
            config,
            set,
            strategies,
            depths,
        } => {
            let config = cli::load_config(&config, &set)?;
            let strategies = parse_strategies(&strategies)?;
            let depths = parse_depths(&depths)?;
            cli::cmd_ablate(&config, &strategies, &depths)?;
        }
        Command::Gradcheck { seed } => {
            cli::cmd_gradcheck(seed)?;
        }
        Command::Synth { spec, out_dir } => {
            cli::cmd_synth(spec.as_deref(), &out_dir)?;
        }
    }
    Ok(())
}

fn parse_strategies(raw: &str) -> msedf::Result<Vec<StackStrategy>> {
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| StackStrategy::parse(s.trim()))
        .collect()
}

fn parse_depths(raw: &str) -> msedf::Result<Vec<usize>> {
    raw.split(',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| msedf::Error::InvalidConfig(format!("bad depth `{s}`")))
        })
        .collect()
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
