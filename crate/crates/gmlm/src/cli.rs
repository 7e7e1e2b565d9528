//! Command-line interface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmlm_core::graph::{generate_synthetic, make_splits, Split, SyntheticSpec};
use gmlm_core::train::evaluate;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::formats::embeddings::save_embedding_dump;
use crate::formats::splits::load_splits;
use crate::formats::{load_graph_json, save_graph_json, Checkpoint, LoadedGraph};
use crate::run::{context_for_checkpoint, run_experiment};

#[derive(Debug, Parser)]
#[command(name = "gmlm", version, about = "Graph and text fusion models for node classification", args_override_self = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic text graph.
    Synth(SynthArgs),
    /// Pretrain and fine-tune over one or more seeds.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Write node embeddings as CSV.
    DumpEmbeddings(DumpArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 200)]
    pub nodes: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.8)]
    pub heterophily: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub vocab_size: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 4.0)]
    pub avg_degree: f64,
    #[arg(long, default_value_t = 1.0)]
    pub feature_signal: f64,
    #[arg(long, default_value_t = 8)]
    pub words_per_text: usize,
    #[arg(long, default_value_t = 0.6)]
    pub text_signal: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Train a single seed.
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub skip_pretrain: bool,
    /// Start fine-tuning from a pretraining checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Split file; recomputed from the checkpoint's seed and ratios otherwise.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Text embeddings for checkpoints trained on precomputed text.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Also write the report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Gnn,
    Text,
    Fused,
}

#[derive(Debug, Args)]
pub struct DumpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, value_enum)]
    pub which: Which,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(args) => synth(&args),
        Command::Train(args) => train(&args),
        Command::Eval(args) => eval(&args),
        Command::DumpEmbeddings(args) => dump(&args),
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        num_nodes: args.nodes,
        num_classes: args.classes,
        heterophily: args.heterophily,
        vocab_size: args.vocab_size,
        feature_dim: args.feature_dim,
        avg_degree: args.avg_degree,
        feature_signal: args.feature_signal,
        words_per_text: args.words_per_text,
        text_signal: args.text_signal,
    };
    let g = generate_synthetic(&spec, args.seed)?;
    println!(
        "nodes={} edges={} classes={} heterophily={:.4}",
        g.num_nodes(),
        g.edges().len(),
        g.num_classes(),
        g.edge_heterophily()
    );
    save_graph_json(&LoadedGraph::with_sequential_ids(g), &args.out)
}

fn train(args: &TrainArgs) -> Result<()> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seeds = vec![seed];
    }
    if let Some(seeds) = &args.seeds {
        cfg.seeds.clone_from(seeds);
    }
    if args.skip_pretrain {
        cfg.skip_pretrain = true;
    }
    if let Some(init) = &args.init {
        cfg.init_checkpoint = Some(init.clone());
    }
    if let Some(w) = args.workers {
        cfg.workers = w;
    }
    if let Some(out) = &args.out {
        cfg.out_dir.clone_from(out);
    }
    let agg = run_experiment(&cfg, &|r| {
        println!(
            "seed {}: test_acc={:.4} test_f1={:.4} best_epoch={} val_f1={:.4}",
            r.seed, r.test_acc, r.test_f1, r.best_epoch, r.val_f1
        );
    })?;
    println!(
        "{} seeds: test_acc={:.4}±{:.4} test_f1={:.4}±{:.4} -> {}",
        agg.num_seeds,
        agg.test_acc.mean,
        agg.test_acc.std,
        agg.test_f1.mean,
        agg.test_f1.std,
        cfg.out_dir.join("aggregate.json").display()
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct EvalReport {
    split: &'static str,
    nodes: usize,
    accuracy: f64,
    macro_f1: f64,
}

fn eval(args: &EvalArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let loaded = load_graph_json(&args.graph)?;
    let ctx = context_for_checkpoint(&ck, &loaded, args.embeddings.as_deref())?;
    let model = ck.restore()?;
    model.check_context(&ctx)?;
    let (name, nodes) = match args.split {
        SplitArg::All => ("all", (0..ctx.num_nodes()).collect()),
        split => {
            let (name, which) = match split {
                SplitArg::Train => ("train", Split::Train),
                SplitArg::Val => ("val", Split::Val),
                _ => ("test", Split::Test),
            };
            let splits = match &args.splits {
                Some(path) => load_splits(path, ctx.num_nodes())?,
                None => make_splits(&loaded.graph, ck.split_ratios, ck.seed)?,
            };
            (name, splits.nodes(which))
        }
    };
    if nodes.is_empty() {
        return Err(Error::Validation(format!("the {name} split is empty")));
    }
    let m = evaluate(&model, &ctx, &nodes)?;
    let report = EvalReport {
        split: name,
        nodes: nodes.len(),
        accuracy: m.accuracy,
        macro_f1: m.macro_f1,
    };
    let text = serde_json::to_string_pretty(&report).map_err(|e| Error::Runtime(e.to_string()))?;
    println!("{text}");
    if let Some(out) = &args.out {
        crate::error::write_atomic(out, text.as_bytes())?;
    }
    Ok(())
}

fn dump(args: &DumpArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint)?;
    let loaded = load_graph_json(&args.graph)?;
    let ctx = context_for_checkpoint(&ck, &loaded, args.embeddings.as_deref())?;
    let model = ck.restore()?;
    model.check_context(&ctx)?;
    let inference = model.infer(&ctx)?;
    let m = match args.which {
        Which::Gnn => &inference.graph,
        Which::Text => &inference.text,
        Which::Fused => &inference.fused,
    };
    save_embedding_dump(&loaded.ids, loaded.graph.labels(), m, &args.out)?;
    println!("wrote {} x {} to {}", m.rows(), m.cols(), args.out.display());
    Ok(())
}
