//! Model checkpoints as JSON: architecture, data dimensions, vocabulary, the
//! split protocol of the run, and every parameter by name.

use std::collections::BTreeMap;
use std::path::Path;

use gmlm_core::model::{DataDims, Gmlm, ModelConfig};
use gmlm_core::text::Vocabulary;
use gmlm_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, write_atomic, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoredTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub stage: Stage,
    pub seed: u64,
    pub config: ModelConfig,
    pub dims: DataDims,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<BTreeMap<String, u32>>,
    /// Whether reversed copies of the graph's relations were added.
    pub reverse_relations: bool,
    pub split_ratios: [f64; 3],
    pub params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn capture(
        model: &Gmlm,
        stage: Stage,
        seed: u64,
        vocab: Option<&Vocabulary>,
        reverse_relations: bool,
        split_ratios: [f64; 3],
    ) -> Self {
        let params = model
            .params
            .iter()
            .map(|(_, p)| {
                let t = StoredTensor {
                    shape: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                };
                (p.name.clone(), t)
            })
            .collect();
        Self {
            stage,
            seed,
            config: model.config.clone(),
            dims: model.dims,
            vocab: vocab.map(|v| v.map().clone()),
            reverse_relations,
            split_ratios,
            params,
        }
    }

    pub fn vocabulary(&self) -> Result<Option<Vocabulary>> {
        self.vocab.clone().map(Vocabulary::from_map).transpose().map_err(Error::from)
    }

    /// Rebuilds the model and loads the stored values into it.
    pub fn restore(&self) -> Result<Gmlm> {
        let mut model = Gmlm::new(self.config.clone(), self.dims, self.seed)?;
        self.load_into(&mut model)?;
        Ok(model)
    }

    /// Copies the stored values into a model of the same architecture.
    pub fn load_into(&self, model: &mut Gmlm) -> Result<()> {
        if model.config != self.config || model.dims != self.dims {
            return Err(Error::Validation(format!(
                "checkpoint was built for {:?} with {:?}, model is {:?} with {:?}",
                self.dims, self.config, model.dims, model.config
            )));
        }
        let values = self
            .params
            .iter()
            .map(|(name, t)| Ok((name.clone(), Tensor::new(t.shape.clone(), t.values.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        model.params.load_values(&values)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::json(path, &e))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Runtime(e.to_string()))?;
        write_atomic(path, text.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use gmlm_core::graph::{generate_synthetic, SyntheticSpec};
    use gmlm_core::model::TextInput;

    fn model() -> (Gmlm, Vocabulary) {
        let g = generate_synthetic(&SyntheticSpec { num_nodes: 12, num_classes: 2, ..Default::default() }, 1).unwrap();
        let vocab = Vocabulary::build(g.texts().iter().map(String::as_str));
        let config = ModelConfig {
            hidden_dim: 4,
            text_dim: 8,
            fused_dim: 8,
            attention_heads: 2,
            encoder_ff_dim: 8,
            max_len: 6,
            ..Default::default()
        };
        let dims = DataDims::of(&g, TextInput::Encoder { vocab_size: vocab.len() });
        (Gmlm::new(config, dims, 7).unwrap(), vocab)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (m, vocab) = model();
        let ck = Checkpoint::capture(&m, Stage::Finetune, 7, Some(&vocab), true, [0.48, 0.32, 0.2]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        let restored = back.restore().unwrap();
        for ((_, a), (_, b)) in m.params.iter().zip(restored.params.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value), "{}", a.name);
        }
        assert_eq!(back.vocabulary().unwrap().unwrap(), vocab);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let (m, _) = model();
        let mut ck = Checkpoint::capture(&m, Stage::Pretrain, 7, None, false, [0.6, 0.2, 0.2]);
        ck.params.get_mut("mask_token").unwrap().shape = vec![2, 1];
        assert!(ck.restore().is_err());
    }
}
