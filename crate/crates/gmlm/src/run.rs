//! Multi-seed experiment runner.
//!
//! Output layout under `out_dir`:
//!
//! ```text
//! graph.json            the graph that was trained on (before reverse relations)
//! vocab.json            token ids of the built-in text encoder
//! aggregate.json        mean and std of test metrics over seeds
//! seed-<s>/splits.json
//! seed-<s>/pretrain.json   pretraining checkpoint (absent when skipped)
//! seed-<s>/checkpoint.json best fine-tuning checkpoint
//! seed-<s>/metrics.jsonl
//! seed-<s>/report.json
//! ```

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use gmlm_core::graph::{add_reverse_relations, make_splits, generate_synthetic, Split, TextGraph};
use gmlm_core::model::{DataDims, Gmlm, GraphContext, TextInput};
use gmlm_core::text::Vocabulary;
use gmlm_core::train::{evaluate, run_finetune, run_pretrain, FinetuneConfig, PretrainConfig};

use crate::config::{DataSource, RunConfig, TextSource};
use crate::error::{Error, Result};
use crate::formats::checkpoint::Stage;
use crate::formats::embeddings::load_embeddings;
use crate::formats::metrics::LrFactors;
use crate::formats::report::save_json;
use crate::formats::splits::save_splits;
use crate::formats::vocab::save_vocab;
use crate::formats::{load_graph_json, save_graph_json, with_tsv_edges, Aggregate, Checkpoint, LoadedGraph, MetricsLog, MetricsRecord, SeedReport};

/// Everything the seeds share: the graph and its model-ready form.
pub struct Dataset {
    pub loaded: LoadedGraph,
    /// The graph the model sees, with reverse relations when enabled.
    pub graph: TextGraph,
    pub ctx: GraphContext,
    pub vocab: Option<Vocabulary>,
    pub dims: DataDims,
}

pub fn load_data(source: &DataSource) -> Result<LoadedGraph> {
    match source {
        DataSource::File { path, edges_tsv } => {
            let g = load_graph_json(path)?;
            match edges_tsv {
                Some(tsv) => with_tsv_edges(&g, tsv),
                None => Ok(g),
            }
        }
        DataSource::Synthetic { spec, seed } => Ok(LoadedGraph::with_sequential_ids(generate_synthetic(spec, *seed)?)),
    }
}

pub fn model_graph(loaded: &LoadedGraph, reverse_relations: bool) -> TextGraph {
    if reverse_relations {
        add_reverse_relations(&loaded.graph)
    } else {
        loaded.graph.clone()
    }
}

impl Dataset {
    pub fn prepare(cfg: &RunConfig) -> Result<Self> {
        let loaded = load_data(&cfg.data)?;
        let graph = model_graph(&loaded, cfg.reverse_relations);
        let (ctx, vocab, text) = match &cfg.text_source {
            TextSource::Encoder => {
                let vocab = Vocabulary::build(graph.texts().iter().map(String::as_str));
                let ctx = GraphContext::with_vocab(&graph, &vocab, cfg.model.max_len)?;
                let text = TextInput::Encoder { vocab_size: vocab.len() };
                (ctx, Some(vocab), text)
            }
            TextSource::Precomputed { path } => {
                let m = load_embeddings(path, graph.num_nodes())?;
                let text = TextInput::Precomputed { width: m.cols() };
                (GraphContext::with_embeddings(&graph, m)?, None, text)
            }
        };
        let dims = DataDims::of(&graph, text);
        Ok(Self {
            loaded,
            graph,
            ctx,
            vocab,
            dims,
        })
    }
}

/// Builds the context a checkpoint expects from a graph file and, for
/// precomputed text, an embedding file.
pub fn context_for_checkpoint(ck: &Checkpoint, loaded: &LoadedGraph, embeddings: Option<&Path>) -> Result<GraphContext> {
    let graph = model_graph(loaded, ck.reverse_relations);
    let ctx = match (ck.vocabulary()?, embeddings) {
        (Some(vocab), _) => GraphContext::with_vocab(&graph, &vocab, ck.config.max_len)?,
        (None, Some(path)) => GraphContext::with_embeddings(&graph, load_embeddings(path, graph.num_nodes())?)?,
        (None, None) => {
            return Err(Error::Validation(
                "checkpoint uses precomputed text embeddings; pass --embeddings".into(),
            ))
        }
    };
    Ok(ctx)
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed-{seed}"))
}

fn record_io(slot: &mut Option<Error>, result: Result<()>) {
    if let (None, Err(e)) = (&slot, result) {
        *slot = Some(e);
    }
}

/// Trains one seed end to end and writes its artifacts to `dir`.
pub fn run_seed(cfg: &RunConfig, data: &Dataset, seed: u64, dir: &Path) -> Result<SeedReport> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let splits = make_splits(&data.graph, cfg.split_ratios, seed)?;
    save_splits(&splits, &dir.join("splits.json"))?;

    let mut model = Gmlm::new(cfg.model.clone(), data.dims, seed)?;
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
    let mut log_err = None;
    let capture = |model: &Gmlm, stage| {
        Checkpoint::capture(model, stage, seed, data.vocab.as_ref(), cfg.reverse_relations, cfg.split_ratios)
    };

    if let Some(path) = &cfg.init_checkpoint {
        Checkpoint::load(path)?.load_into(&mut model)?;
    } else if !cfg.skip_pretrain {
        let pcfg = PretrainConfig { seed, ..cfg.pretrain.clone() };
        run_pretrain(&mut model, &data.ctx, &pcfg, |epoch, e| {
            let record = MetricsRecord {
                stage: "pretrain".into(),
                epoch,
                loss: e.loss,
                val_acc: None,
                val_f1: None,
                lr_factors: LrFactors { graph: e.lr_factor, text: 0.0, other: e.lr_factor },
            };
            record_io(&mut log_err, log.write(&record));
        })?;
        if let Some(e) = log_err.take() {
            return Err(e);
        }
        capture(&model, Stage::Pretrain).save(&dir.join("pretrain.json"))?;
    }

    let fcfg = FinetuneConfig { seed, ..cfg.finetune.clone() };
    let report = run_finetune(&mut model, &data.ctx, &splits, &fcfg, |epoch, e| {
        let record = MetricsRecord {
            stage: "finetune".into(),
            epoch,
            loss: e.loss,
            val_acc: Some(e.val.accuracy),
            val_f1: Some(e.val.macro_f1),
            lr_factors: LrFactors { graph: e.lr_factor, text: e.lr_factor, other: e.lr_factor },
        };
        record_io(&mut log_err, log.write(&record));
    })?;
    if let Some(e) = log_err {
        return Err(e);
    }
    capture(&model, Stage::Finetune).save(&dir.join("checkpoint.json"))?;

    let test_nodes = splits.nodes(Split::Test);
    if test_nodes.is_empty() {
        return Err(Error::Validation("test split is empty".into()));
    }
    let test = evaluate(&model, &data.ctx, &test_nodes)?;
    let seed_report = SeedReport {
        seed,
        test_acc: test.accuracy,
        test_f1: test.macro_f1,
        best_epoch: report.best_epoch,
        val_f1: report.best_val_f1,
        epochs_run: report.epochs_run,
    };
    save_json(&seed_report, &dir.join("report.json"))?;
    Ok(seed_report)
}

/// Validates the config and the data for every seed, then trains all seeds
/// on up to `cfg.workers` threads. `on_seed` sees each finished seed.
pub fn run_experiment(cfg: &RunConfig, on_seed: &(dyn Fn(&SeedReport) + Sync)) -> Result<Aggregate> {
    cfg.validate()?;
    let data = Dataset::prepare(cfg)?;
    for &seed in &cfg.seeds {
        let splits = make_splits(&data.graph, cfg.split_ratios, seed)?;
        for split in [Split::Train, Split::Val, Split::Test] {
            if splits.count(split) == 0 {
                return Err(Error::Validation(format!("seed {seed}: the {split:?} split is empty")));
            }
        }
    }
    if let Some(path) = &cfg.init_checkpoint {
        let ck = Checkpoint::load(path)?;
        let mut probe = Gmlm::new(cfg.model.clone(), data.dims, 0)?;
        ck.load_into(&mut probe)?;
    }
    save_graph_json(&data.loaded, &cfg.out_dir.join("graph.json"))?;
    if let Some(vocab) = &data.vocab {
        save_vocab(vocab, &cfg.out_dir.join("vocab.json"))?;
    }

    let workers = match cfg.workers {
        0 => std::thread::available_parallelism().map_or(1, |n| n.get()),
        n => n,
    }
    .min(cfg.seeds.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SeedReport>>>> = Mutex::new(cfg.seeds.iter().map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&seed) = cfg.seeds.get(i) else { break };
                let result = run_seed(cfg, &data, seed, &seed_dir(&cfg.out_dir, seed));
                if let Ok(r) = &result {
                    on_seed(r);
                }
                results.lock().expect("no worker panicked")[i] = Some(result);
            });
        }
    });
    let runs = results
        .into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every seed ran"))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = Aggregate::new(runs);
    save_json(&aggregate, &cfg.out_dir.join("aggregate.json"))?;
    Ok(aggregate)
}
