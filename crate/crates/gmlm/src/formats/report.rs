//! Per-seed results and their aggregate over seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_atomic, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub test_acc: f64,
    pub test_f1: f64,
    pub best_epoch: usize,
    pub val_f1: f64,
    pub epochs_run: usize,
}

/// Mean and population standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Self { mean, std: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub num_seeds: usize,
    pub test_acc: Summary,
    pub test_f1: Summary,
    pub runs: Vec<SeedReport>,
}

impl Aggregate {
    pub fn new(runs: Vec<SeedReport>) -> Self {
        let acc: Vec<f64> = runs.iter().map(|r| r.test_acc).collect();
        let f1: Vec<f64> = runs.iter().map(|r| r.test_f1).collect();
        Self {
            num_seeds: runs.len(),
            test_acc: Summary::of(&acc),
            test_f1: Summary::of(&f1),
            runs,
        }
    }
}

pub fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Runtime(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::json(path, &e))
}
