//! Split files: `{"seed": 3, "assignment": [0, 2, 1, ...]}` with 0 = train,
//! 1 = val, 2 = test.

use std::path::Path;

use gmlm_core::graph::{Split, SplitAssignment};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_atomic, Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SplitFile {
    seed: u64,
    assignment: Vec<u8>,
}

pub fn splits_to_json(s: &SplitAssignment) -> String {
    let file = SplitFile {
        seed: s.seed,
        assignment: s.tags.iter().map(|&t| t as u8).collect(),
    };
    serde_json::to_string(&file).expect("split file serializes")
}

pub fn parse_splits(text: &str, path: &Path) -> Result<SplitAssignment> {
    let file: SplitFile = serde_json::from_str(text).map_err(|e| Error::json(path, &e))?;
    let tags = file
        .assignment
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            Split::from_index(t).ok_or_else(|| Error::Validation(format!("node {i} has split tag {t}, expected 0, 1 or 2")))
        })
        .collect::<Result<_>>()?;
    Ok(SplitAssignment { seed: file.seed, tags })
}

pub fn load_splits(path: &Path, num_nodes: usize) -> Result<SplitAssignment> {
    let s = parse_splits(&read_to_string(path)?, path)?;
    if s.tags.len() != num_nodes {
        return Err(Error::Validation(format!(
            "{} assigns {} nodes, graph has {num_nodes}",
            path.display(),
            s.tags.len()
        )));
    }
    Ok(s)
}

pub fn save_splits(s: &SplitAssignment, path: &Path) -> Result<()> {
    write_atomic(path, splits_to_json(s).as_bytes())
}
