//! Canonical JSON graph files and tab-separated edge lists.
//!
//! ```json
//! {"nodes": [{"id": 0, "features": [0.1, 2.0], "text": "...", "label": 1}],
//!  "edges": [[0, 1, 0]],
//!  "meta": {"num_classes": 2, "num_relations": 1}}
//! ```
//!
//! Node ids are arbitrary unique integers; edges refer to them. Nodes are
//! stored in file order.

use std::collections::HashMap;
use std::path::Path;

use gmlm_core::graph::{Edge, TextGraph};
use gmlm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_atomic, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NodeRecord {
    id: u64,
    features: Vec<f64>,
    #[serde(default)]
    text: String,
    label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Meta {
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_relations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    edges: Vec<(u64, u64, usize)>,
    meta: Meta,
}

/// A graph together with the external id of every node.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedGraph {
    pub graph: TextGraph,
    pub ids: Vec<u64>,
}

impl LoadedGraph {
    /// Ids `0..N` in order.
    pub fn with_sequential_ids(graph: TextGraph) -> Self {
        let ids = (0..graph.num_nodes() as u64).collect();
        Self { graph, ids }
    }

    fn index(&self) -> HashMap<u64, usize> {
        self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect()
    }
}

pub fn parse_graph_json(text: &str, path: &Path) -> Result<LoadedGraph> {
    let file: GraphFile = serde_json::from_str(text).map_err(|e| Error::json(path, &e))?;
    build(file)
}

pub fn load_graph_json(path: &Path) -> Result<LoadedGraph> {
    parse_graph_json(&read_to_string(path)?, path)
}

fn build(file: GraphFile) -> Result<LoadedGraph> {
    let n = file.nodes.len();
    if n == 0 {
        return Err(Error::Validation("graph file has no nodes".into()));
    }
    let d = file.nodes[0].features.len();
    let mut index = HashMap::with_capacity(n);
    let mut data = Vec::with_capacity(n * d);
    for (i, node) in file.nodes.iter().enumerate() {
        if index.insert(node.id, i).is_some() {
            return Err(Error::Validation(format!("duplicate node id {}", node.id)));
        }
        if node.features.len() != d {
            return Err(Error::Validation(format!(
                "node {} has {} features, node {} has {d}",
                node.id,
                node.features.len(),
                file.nodes[0].id
            )));
        }
        data.extend_from_slice(&node.features);
    }
    let edges = resolve_edges(&index, &file.edges)?;
    let num_relations = file
        .meta
        .num_relations
        .unwrap_or_else(|| edges.iter().map(|e| e.relation + 1).max().unwrap_or(1));
    let features = Tensor::new(vec![n, d], data)?;
    let graph = TextGraph::new(
        features,
        edges,
        file.nodes.iter().map(|n| n.text.clone()).collect(),
        file.nodes.iter().map(|n| n.label).collect(),
        file.meta.num_classes,
        num_relations,
    )?;
    Ok(LoadedGraph {
        graph,
        ids: file.nodes.iter().map(|n| n.id).collect(),
    })
}

fn resolve_edges(index: &HashMap<u64, usize>, raw: &[(u64, u64, usize)]) -> Result<Vec<Edge>> {
    raw.iter()
        .map(|&(s, t, r)| {
            let lookup = |id: u64| {
                index
                    .get(&id)
                    .copied()
                    .ok_or_else(|| Error::Validation(format!("edge ({s}, {t}) references unknown node {id}")))
            };
            Ok(Edge::new(lookup(s)?, lookup(t)?, r))
        })
        .collect()
}

pub fn graph_to_json(g: &LoadedGraph) -> Result<String> {
    let graph = &g.graph;
    let nodes = (0..graph.num_nodes())
        .map(|i| NodeRecord {
            id: g.ids[i],
            features: graph.features().row(i).to_vec(),
            text: graph.texts()[i].clone(),
            label: graph.labels()[i],
        })
        .collect();
    let edges = graph
        .edges()
        .iter()
        .map(|e| (g.ids[e.src], g.ids[e.dst], e.relation))
        .collect();
    let file = GraphFile {
        nodes,
        edges,
        meta: Meta {
            num_classes: graph.num_classes(),
            num_relations: Some(graph.num_relations()),
        },
    };
    serde_json::to_string(&file).map_err(|e| Error::Runtime(e.to_string()))
}

pub fn save_graph_json(g: &LoadedGraph, path: &Path) -> Result<()> {
    write_atomic(path, graph_to_json(g)?.as_bytes())
}

/// Parses `src<TAB>dst<TAB>relation` lines. Blank lines and lines starting
/// with `#` are skipped; the relation column may be omitted (relation 0).
pub fn parse_edges_tsv(text: &str, path: &Path) -> Result<Vec<(u64, u64, usize)>> {
    let mut out = Vec::new();
    for (k, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if !(2..=3).contains(&fields.len()) {
            return Err(Error::parse(path, k + 1, format!("expected 2 or 3 tab-separated fields, got {}", fields.len())));
        }
        let num = |s: &str, what: &str| {
            s.parse::<u64>()
                .map_err(|_| Error::parse(path, k + 1, format!("invalid {what} {s:?}")))
        };
        let src = num(fields[0], "source id")?;
        let dst = num(fields[1], "target id")?;
        let rel = match fields.get(2) {
            Some(r) => num(r, "relation id")? as usize,
            None => 0,
        };
        out.push((src, dst, rel));
    }
    Ok(out)
}

/// Replaces the edges of a loaded graph with those of a TSV file.
pub fn with_tsv_edges(g: &LoadedGraph, path: &Path) -> Result<LoadedGraph> {
    let raw = parse_edges_tsv(&read_to_string(path)?, path)?;
    let edges = resolve_edges(&g.index(), &raw)?;
    let num_relations = edges
        .iter()
        .map(|e| e.relation + 1)
        .max()
        .unwrap_or(1)
        .max(g.graph.num_relations());
    let old = &g.graph;
    let graph = TextGraph::new(
        old.features().clone(),
        edges,
        old.texts().to_vec(),
        old.labels().to_vec(),
        old.num_classes(),
        num_relations,
    )?;
    Ok(LoadedGraph { graph, ids: g.ids.clone() })
}
