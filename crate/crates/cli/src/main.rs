//! `uann` — pipeline driver for the uncertainty-aware retrieval engine.
//!
//! Subcommands cover the full flow: synthesize data, compute Swing
//! similarities, train the scorer, build and reweight the graph index,
//! retrieve candidates, score them, and run the A/B/C ablation. Every
//! subcommand is a pure function of (input files, config, root seed); exit
//! codes are 2 for a missing input file, 3 for a config violation, 1 for
//! anything else.

mod commands;
mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use commands::{CliResult, ScorerMode};

#[derive(Parser)]
#[command(
    name = "uann",
    version,
    about = "Uncertainty-aware approximate-nearest-neighbor retrieval pipeline",
    propagate_version = true
)]
struct Cli {
    /// Plain-text config file: one `key = value` per line, `#` comments.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable); wins over the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Root seed; every stage derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction dataset with ground truth.
    Synth {
        /// Output directory for interactions.tsv, truth.tsv, oracle.uemb,
        /// observed.uemb, and categories.tsv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Compute the Swing item-to-item table from the train split.
    Swing {
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long, default_value = "out/swing.tsv")]
        out: PathBuf,
    },
    /// Train the two-tower scorer and its uncertainty heads on the train
    /// split, exporting the model and its item embeddings.
    Train {
        #[arg(long)]
        interactions: PathBuf,
        /// Swing table computed from the same interactions file.
        #[arg(long)]
        swing: PathBuf,
        #[arg(long, default_value = "out/model.umdl")]
        out_model: PathBuf,
        #[arg(long, default_value = "out/items.uemb")]
        out_embeddings: PathBuf,
    },
    /// Build the layered graph index over an embedding table.
    BuildIndex {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value = "out/index.uhnw")]
        out: PathBuf,
    },
    /// Reweight edges by estimated variance, then prune to n_prime.
    ReweightIndex {
        #[arg(long)]
        index: PathBuf,
        /// Embedding table the index was built over.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, value_enum, default_value_t = ScorerMode::Count)]
        mode: ScorerMode,
        /// Interaction log for item counts (count mode).
        #[arg(long)]
        interactions: Option<PathBuf>,
        /// Trained model file (model mode).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "out/reweighted.uhnw")]
        out: PathBuf,
    },
    /// Retrieve top-k candidates per user by fusion score.
    Retrieve {
        #[arg(long)]
        index: PathBuf,
        /// Embedding table the index was built over.
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long, value_enum, default_value_t = ScorerMode::Count)]
        mode: ScorerMode,
        /// Trained model file (model mode).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long, default_value = "out/retrieval.tsv")]
        out: PathBuf,
    },
    /// Score a retrieval run: Recall@N, CateEntropy@N, NewCateRatio@N.
    Evaluate {
        #[arg(long)]
        retrieval: PathBuf,
        /// Interaction log the run was retrieved from; the leave-one-out
        /// split hash must match the one recorded in the retrieval file.
        #[arg(long)]
        interactions: PathBuf,
        #[arg(long)]
        categories: PathBuf,
        /// Optional explicit ground truth; defaults to the leave-one-out
        /// holdout of the interactions.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value = "out/metrics.tsv")]
        out: PathBuf,
    },
    /// Run the A/B/C ablation and the beta novelty sweep.
    Ablate {
        /// Output directory for ablation.tsv and beta_sweep.tsv.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let file_text = match &cli.config {
        Some(path) => Some((path.as_path(), commands::read_config_file(path)?)),
        None => None,
    };
    let cfg = config::resolve(
        file_text.as_ref().map(|(p, t)| (*p, t.as_str())),
        &cli.set,
        cli.seed,
    )
    .map_err(commands::CliError::Core)?;
    cfg.log_resolved();
    match &cli.command {
        Command::Synth { out } => commands::synth(&cfg, out),
        Command::Swing { interactions, out } => commands::swing(&cfg, interactions, out),
        Command::Train {
            interactions,
            swing,
            out_model,
            out_embeddings,
        } => commands::train_model(&cfg, interactions, swing, out_model, out_embeddings),
        Command::BuildIndex { embeddings, out } => commands::build_index_cmd(&cfg, embeddings, out),
        Command::ReweightIndex {
            index,
            embeddings,
            mode,
            interactions,
            model,
            out,
        } => commands::reweight_index(
            &cfg,
            index,
            embeddings,
            *mode,
            interactions.as_deref(),
            model.as_deref(),
            out,
        ),
        Command::Retrieve {
            index,
            embeddings,
            interactions,
            mode,
            model,
            out,
        } => commands::retrieve(
            &cfg,
            index,
            embeddings,
            interactions,
            *mode,
            model.as_deref(),
            out,
        ),
        Command::Evaluate {
            retrieval,
            interactions,
            categories,
            truth,
            out,
        } => commands::evaluate(
            &cfg,
            retrieval,
            interactions,
            categories,
            truth.as_deref(),
            out,
        ),
        Command::Ablate { out } => commands::ablate(&cfg, out),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("{e}");
        std::process::exit(e.exit_code());
    }
}
