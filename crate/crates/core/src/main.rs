use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use kgpath::pipeline::{self, Retriever, RunConfig};

#[derive(Parser)]
#[command(
    name = "kgpath",
    version,
    about = "Path retrieval over knowledge graphs"
)]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory (overrides `out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed for mining, initialization and training.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Default)]
struct DataArgs {
    /// Tab-separated triple file.
    #[arg(long)]
    graph: Option<PathBuf>,
    /// Line-delimited query file.
    #[arg(long)]
    qa: Option<PathBuf>,
}

#[derive(Args, Default)]
struct MineArgs {
    /// Negatives per hop.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_hop: Option<usize>,
}

#[derive(Args, Default)]
struct TrainArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Negatives kept per instance each epoch.
    #[arg(long)]
    k_negatives: Option<usize>,
    /// Train with uniform path weights.
    #[arg(long)]
    unweighted: bool,
}

#[derive(Args, Default)]
struct RetrieveArgs {
    #[arg(long)]
    beam_width: Option<usize>,
    #[arg(long)]
    top_k: Option<usize>,
    #[arg(long, value_parser = ["trained", "similarity"])]
    retriever: Option<String>,
    /// `mock` or `http`.
    #[arg(long)]
    generator: Option<String>,
    #[arg(long)]
    split: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with a controlled path-frequency skew.
    Synth,
    /// Load and validate the graph and query files.
    Ingest(DataArgs),
    /// Mine hard positives and negatives from the train split.
    Mine(MineArgs),
    /// Train the path scorer.
    Train(TrainArgs),
    /// Beam-search retrieval and answer generation.
    Retrieve(RetrieveArgs),
    /// Hits@1 and F1 against gold answers.
    Evaluate,
    /// Shortcut and long-tail bias report.
    Diagnose,
    /// All stages in order.
    Run {
        /// Generate the synthetic corpus first instead of reading `data`.
        #[arg(long)]
        synthetic: bool,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        mine: MineArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        retrieve: RetrieveArgs,
    },
}

fn apply_data(cfg: &mut RunConfig, a: &DataArgs) {
    if let Some(g) = &a.graph {
        cfg.data.graph = Some(g.clone());
    }
    if let Some(q) = &a.qa {
        cfg.data.qa = Some(q.clone());
    }
}

fn apply_mine(cfg: &mut RunConfig, a: &MineArgs) {
    if let Some(k) = a.k {
        cfg.mining.k = k;
    }
    if let Some(h) = a.max_hop {
        cfg.mining.max_hop = h;
        cfg.inference.max_hop = h;
    }
}

fn apply_train(cfg: &mut RunConfig, a: &TrainArgs) {
    if let Some(e) = a.epochs {
        cfg.training.epochs = e;
    }
    if let Some(lr) = a.learning_rate {
        cfg.training.learning_rate = lr;
    }
    if let Some(k) = a.k_negatives {
        cfg.training.k_negatives = k;
    }
    if a.unweighted {
        cfg.training.weighted = false;
    }
}

fn apply_retrieve(cfg: &mut RunConfig, a: &RetrieveArgs) {
    if let Some(b) = a.beam_width {
        cfg.inference.beam_width = b;
    }
    if let Some(k) = a.top_k {
        cfg.inference.top_k = k;
    }
    match a.retriever.as_deref() {
        Some("similarity") => cfg.retriever = Retriever::Similarity,
        Some(_) => cfg.retriever = Retriever::Trained,
        None => {}
    }
    if let Some(g) = &a.generator {
        cfg.inference.generator = g.clone();
    }
    if let Some(s) = &a.split {
        cfg.eval_split = s.clone();
    }
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }

    match &cli.command {
        Command::Synth => {
            let stats = pipeline::cmd_synth(&mut cfg)?;
            println!(
                "synthetic corpus in {}: distractor win rate {:.3}, frequency ratio {:.1}",
                cfg.stage_dir("synth").display(),
                stats.distractor_win_rate,
                stats.frequency_ratio
            );
        }
        Command::Ingest(a) => {
            apply_data(&mut cfg, a);
            let s = pipeline::cmd_ingest(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Mine(a) => {
            apply_mine(&mut cfg, a);
            let records = pipeline::cmd_mine(&cfg)?;
            println!("mined {} instances", records.len());
        }
        Command::Train(a) => {
            apply_train(&mut cfg, a);
            pipeline::cmd_train(&cfg)?;
            println!("checkpoint written to {}", cfg.stage_dir("train").display());
        }
        Command::Retrieve(a) => {
            apply_retrieve(&mut cfg, a);
            let records = pipeline::cmd_retrieve(&cfg)?;
            println!("retrieved paths for {} queries", records.len());
        }
        Command::Evaluate => {
            let m = pipeline::cmd_evaluate(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Diagnose => {
            let report = pipeline::cmd_diagnose(&cfg)?;
            print!("{}", report.render());
        }
        Command::Run {
            synthetic,
            data,
            mine,
            train,
            retrieve,
        } => {
            apply_data(&mut cfg, data);
            apply_mine(&mut cfg, mine);
            apply_train(&mut cfg, train);
            apply_retrieve(&mut cfg, retrieve);
            let report = pipeline::run_all(&cfg, *synthetic)?;
            print!("{}", report.render());
        }
    }
    Ok(())
}
