//! Vocabulary files: a JSON object mapping each token to its id.

use std::collections::BTreeMap;
use std::path::Path;

use gmlm_core::text::Vocabulary;

use crate::error::{read_to_string, write_atomic, Error, Result};

pub fn save_vocab(vocab: &Vocabulary, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab.map()).map_err(|e| Error::Runtime(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let map: BTreeMap<String, u32> = serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::json(path, &e))?;
    Ok(Vocabulary::from_map(map)?)
}
