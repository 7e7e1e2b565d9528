//! Small graphs and models shared by unit tests.

use alloc::vec::Vec;

use crate::graph::{add_reverse_relations, generate_synthetic, SyntheticSpec, TextGraph};
use crate::model::{DataDims, GraphContext, Gmlm, ModelConfig, TextInput};
use crate::text::Vocabulary;

pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        hidden_dim: 4,
        text_dim: 8,
        fused_dim: 8,
        attention_heads: 2,
        encoder_layers: 2,
        encoder_heads: 2,
        encoder_ff_dim: 12,
        max_len: 10,
        ..ModelConfig::default()
    }
}

pub fn tiny_graph(n: usize, seed: u64) -> TextGraph {
    let spec = SyntheticSpec {
        num_nodes: n,
        num_classes: 2,
        vocab_size: 12,
        feature_dim: 3,
        avg_degree: 3.0,
        words_per_text: 4,
        ..SyntheticSpec::default()
    };
    add_reverse_relations(&generate_synthetic(&spec, seed).unwrap())
}

pub fn tiny_setup(n: usize, config: ModelConfig, seed: u64) -> (Gmlm, GraphContext) {
    let g = tiny_graph(n, seed);
    let vocab = Vocabulary::build(g.texts().iter().map(|s| s.as_str()));
    let ctx = GraphContext::with_vocab(&g, &vocab, config.max_len).unwrap();
    let dims = DataDims::of(&g, TextInput::Encoder { vocab_size: vocab.len() });
    (Gmlm::new(config, dims, seed).unwrap(), ctx)
}

pub fn param_values(m: &Gmlm) -> Vec<(alloc::string::String, Vec<u64>)> {
    m.params
        .iter()
        .map(|(_, p)| (p.name.clone(), p.value.data().iter().map(|v| v.to_bits()).collect()))
        .collect()
}
