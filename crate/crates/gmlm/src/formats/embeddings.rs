//! Precomputed text embeddings and embedding dumps.
//!
//! Input files hold one row per node in graph order: plain comma-separated
//! numbers (`.csv`, no header) or a JSON array of arrays (`.json`).

use std::path::Path;

use gmlm_core::Tensor;

use crate::error::{read_to_string, write_atomic, Error, Result};

fn parse_csv(text: &str, path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut rows = Vec::new();
    for (k, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(k + 1, |p| p.line() as usize);
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(k + 1, |p| p.line() as usize);
        let row = record
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| Error::parse(path, line, format!("invalid number {f:?}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Loads an `N x d` matrix and checks it has one row per node.
pub fn load_embeddings(path: &Path, num_nodes: usize) -> Result<Tensor> {
    let text = read_to_string(path)?;
    let rows = match path.extension().and_then(|e| e.to_str()) {
        Some("json") => serde_json::from_str::<Vec<Vec<f64>>>(&text).map_err(|e| Error::json(path, &e))?,
        _ => parse_csv(&text, path)?,
    };
    if rows.len() != num_nodes {
        return Err(Error::Validation(format!(
            "{} has {} embedding rows, graph has {num_nodes} nodes",
            path.display(),
            rows.len()
        )));
    }
    let width = rows.first().map_or(0, Vec::len);
    if width == 0 {
        return Err(Error::Validation(format!("{} has empty embedding rows", path.display())));
    }
    if let Some(i) = rows.iter().position(|r| r.len() != width) {
        return Err(Error::Validation(format!(
            "{}: row {} has {} values, row 1 has {width}",
            path.display(),
            i + 1,
            rows[i].len()
        )));
    }
    Ok(Tensor::from_rows(&rows)?)
}

/// Writes plain embedding rows, the format [`load_embeddings`] reads.
pub fn save_embeddings(m: &Tensor, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in m.to_rows() {
        let line: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Writes `id,label,d0,d1,...` rows for external projection tools.
pub fn save_embedding_dump(ids: &[u64], labels: &[usize], m: &Tensor, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["id".to_string(), "label".to_string()];
    header.extend((0..m.cols()).map(|j| format!("d{j}")));
    let csv_err = |e: csv::Error| Error::Runtime(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for (i, row) in m.to_rows().iter().enumerate() {
        let mut rec = vec![ids[i].to_string(), labels[i].to_string()];
        rec.extend(row.iter().map(f64::to_string));
        w.write_record(&rec).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
    write_atomic(path, &bytes)
}
