//! On-disk formats: graphs, splits, text embeddings, vocabularies,
//! checkpoints, metrics logs, and run reports.

pub mod checkpoint;
pub mod embeddings;
pub mod graph;
pub mod metrics;
pub mod report;
pub mod splits;
pub mod vocab;

pub use checkpoint::Checkpoint;
pub use graph::{load_graph_json, save_graph_json, with_tsv_edges, LoadedGraph};
pub use metrics::{MetricsLog, MetricsRecord};
pub use report::{load_json as load_json_report, Aggregate, SeedReport, Summary};
