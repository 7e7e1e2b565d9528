//! Experiment configuration: one JSON document with defaults for every
//! field except the data source.
//!
//! ```json
//! {"data": {"synthetic": {"spec": {"num_nodes": 200, "heterophily": 0.8}, "seed": 1}},
//!  "seeds": [1, 2, 3],
//!  "out_dir": "runs/demo"}
//! ```

use std::path::{Path, PathBuf};

use gmlm_core::graph::SyntheticSpec;
use gmlm_core::model::ModelConfig;
use gmlm_core::train::{FinetuneConfig, PretrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// A canonical JSON graph, optionally with its edges replaced by a TSV
    /// edge list.
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        edges_tsv: Option<PathBuf>,
    },
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        #[serde(default)]
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TextSource {
    /// Train the built-in transformer encoder on the node texts.
    #[default]
    Encoder,
    /// Fixed embeddings, one row per node.
    Precomputed { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub split_ratios: [f64; 3],
    /// Each seed drives the split, the initialization, and both stages.
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub text_source: TextSource,
    pub reverse_relations: bool,
    pub skip_pretrain: bool,
    /// Start fine-tuning from this pretraining checkpoint instead of
    /// pretraining.
    pub init_checkpoint: Option<PathBuf>,
    /// Upper bound on seeds trained concurrently; 0 picks the core count.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic {
                spec: SyntheticSpec::default(),
                seed: 0,
            },
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            split_ratios: [0.48, 0.32, 0.20],
            seeds: (1..=10).collect(),
            out_dir: PathBuf::from("runs"),
            text_source: TextSource::Encoder,
            reverse_relations: true,
            skip_pretrain: false,
            init_checkpoint: None,
            workers: 0,
        }
    }
}

impl RunConfig {
    /// Parses a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::json(path, &e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let DataSource::File { path, edges_tsv } = &mut self.data {
            fix(path);
            if let Some(e) = edges_tsv {
                fix(e);
            }
        }
        if let TextSource::Precomputed { path } = &mut self.text_source {
            fix(path);
        }
        if let Some(p) = &mut self.init_checkpoint {
            fix(p);
        }
        fix(&mut self.out_dir);
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Validation("seeds must not be empty".into()));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Validation("seeds must be distinct".into()));
        }
        if self.split_ratios.iter().any(|r| !(0.0..=1.0).contains(r))
            || (self.split_ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Validation(format!(
                "split ratios {:?} must be non-negative and sum to 1",
                self.split_ratios
            )));
        }
        self.model.validate()?;
        if !self.skip_pretrain && self.init_checkpoint.is_none() {
            self.pretrain.validate()?;
        }
        self.finetune.validate()?;
        let mut paths = Vec::new();
        match &self.data {
            DataSource::File { path, edges_tsv } => {
                paths.push(path);
                paths.extend(edges_tsv);
            }
            DataSource::Synthetic { spec, .. } => spec.validate()?,
        }
        if let TextSource::Precomputed { path } = &self.text_source {
            paths.push(path);
        }
        paths.extend(&self.init_checkpoint);
        for p in paths {
            if !p.is_file() {
                return Err(Error::Validation(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg: RunConfig = serde_json::from_str(r#"{"seeds": [3]}"#).unwrap();
        assert_eq!(cfg.finetune.max_epochs, 500);
        assert_eq!(cfg.pretrain.epochs, 30);
        assert_eq!(cfg.split_ratios, [0.48, 0.32, 0.20]);
        assert!(cfg.reverse_relations);
        cfg.validate().unwrap();
        assert_eq!(RunConfig::default().seeds.len(), 10);
    }

    #[test]
    fn unknown_fields_and_bad_values_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seedz": [3]}"#).is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"seeds": []}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig = serde_json::from_str(r#"{"split_ratios": [0.5, 0.5, 0.5]}"#).unwrap();
        assert!(cfg.validate().is_err());
        let cfg: RunConfig =
            serde_json::from_str(r#"{"data": {"file": {"path": "missing.json"}}}"#).unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        std::fs::write(
            &path,
            r#"{"data": {"file": {"path": "g.json"}}, "text_source": {"precomputed": {"path": "e.csv"}}, "out_dir": "out"}"#,
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.out_dir, dir.path().join("out"));
        assert_eq!(
            cfg.data,
            DataSource::File {
                path: dir.path().join("g.json"),
                edges_tsv: None
            }
        );
    }
}
