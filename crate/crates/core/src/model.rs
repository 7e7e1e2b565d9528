//! The assembled model: graph branch, text branch, cross-attention fusion,
//! and classifier.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{validation, Result};
use crate::fusion::{bidirectional_fuse, fuse_and_classify, AttentionScope, BiCrossAttention, FusionHead, HeadOutput};
use crate::gnn::{soft_mask, GnnBranch, GnnDims, GnnOutput, RelationalAdjacency};
use crate::graph::{MaskKind, NodeMask, TextGraph};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{assemble_text_matrix, gate_precomputed, tokenize, TextEncoder, TextEncoderConfig, TokenRow, Vocabulary};

/// Architecture hyperparameters that do not depend on the data.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Width of text embeddings and of the fused graph embedding.
    pub text_dim: usize,
    pub fused_dim: usize,
    pub attention_heads: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub encoder_ff_dim: usize,
    pub max_len: usize,
    pub keep_prob: f64,
    pub attention_scope: AttentionScope,
    /// Exclude inactive nodes' text rows as keys of text-to-graph attention.
    pub mask_inactive_text_keys: bool,
    pub layer_norm_eps: f64,
    pub text_micro_batch: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            text_dim: 128,
            fused_dim: 128,
            attention_heads: 4,
            encoder_layers: 2,
            encoder_heads: 2,
            encoder_ff_dim: 256,
            max_len: 32,
            keep_prob: 0.8,
            attention_scope: AttentionScope::Full,
            mask_inactive_text_keys: false,
            layer_norm_eps: 1e-5,
            text_micro_batch: 16,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hidden_dim", self.hidden_dim),
            ("text_dim", self.text_dim),
            ("fused_dim", self.fused_dim),
            ("text_micro_batch", self.text_micro_batch),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(validation(alloc::format!("{name} must be positive")));
        }
        if self.attention_heads == 0 || !self.text_dim.is_multiple_of(self.attention_heads) {
            return Err(validation(alloc::format!(
                "text_dim {} is not divisible by attention_heads {}",
                self.text_dim,
                self.attention_heads
            )));
        }
        if self.encoder_heads == 0 || !self.text_dim.is_multiple_of(self.encoder_heads) {
            return Err(validation(alloc::format!(
                "text_dim {} is not divisible by encoder_heads {}",
                self.text_dim,
                self.encoder_heads
            )));
        }
        if self.max_len < 2 {
            return Err(validation("max_len must be at least 2"));
        }
        if !(self.keep_prob > 0.0 && self.keep_prob <= 1.0) {
            return Err(validation("keep_prob must lie in (0, 1]"));
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(validation("layer_norm_eps must be positive"));
        }
        Ok(())
    }
}

/// Where per-node text embeddings come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum TextInput {
    /// The built-in encoder over a vocabulary of this size.
    Encoder { vocab_size: usize },
    /// A fixed embedding matrix of this width supplied with the graph.
    Precomputed { width: usize },
}

/// Data-dependent sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct DataDims {
    pub feature_dim: usize,
    pub num_relations: usize,
    pub num_classes: usize,
    pub text: TextInput,
}

impl DataDims {
    pub fn of(g: &TextGraph, text: TextInput) -> Self {
        Self {
            feature_dim: g.feature_dim(),
            num_relations: g.num_relations(),
            num_classes: g.num_classes(),
            text,
        }
    }
}

/// Everything the forward pass needs from a graph, prepared once.
#[derive(Debug, Clone)]
pub struct GraphContext {
    pub features: Tensor,
    pub adjacency: RelationalAdjacency,
    pub degrees: Vec<usize>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub tokens: Option<Vec<TokenRow>>,
    pub precomputed: Option<Tensor>,
}

impl GraphContext {
    /// Context for the built-in text encoder.
    pub fn with_vocab(g: &TextGraph, vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        let tokens = g
            .texts()
            .iter()
            .map(|t| tokenize(t, vocab, max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::base(g, Some(tokens), None))
    }

    /// Context for precomputed text embeddings (one row per node).
    pub fn with_embeddings(g: &TextGraph, embeddings: Tensor) -> Result<Self> {
        if embeddings.rank() != 2 || embeddings.rows() != g.num_nodes() {
            return Err(validation(alloc::format!(
                "embedding matrix {:?} needs {} rows",
                embeddings.shape(),
                g.num_nodes()
            )));
        }
        Ok(Self::base(g, None, Some(embeddings)))
    }

    fn base(g: &TextGraph, tokens: Option<Vec<TokenRow>>, precomputed: Option<Tensor>) -> Self {
        Self {
            features: g.features().clone(),
            adjacency: RelationalAdjacency::from_graph(g),
            degrees: g.degrees(),
            labels: g.labels().to_vec(),
            num_classes: g.num_classes(),
            tokens,
            precomputed,
        }
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }
}

/// Inputs of one forward pass besides the graph.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOptions<'a> {
    /// Nodes whose features are soft-masked (none when `None`).
    pub perturb: Option<&'a NodeMask>,
    pub beta: f64,
    /// Nodes whose texts are encoded; all other text rows are zero.
    pub active: &'a NodeMask,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub graph: GnnOutput,
    pub text: Var,
    pub graph_to_text: Var,
    pub text_to_graph: Var,
    pub head: HeadOutput,
}

/// Graph branch, text branch, bi-directional fusion, and classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Gmlm {
    pub config: ModelConfig,
    pub dims: DataDims,
    pub params: ParamStore,
    pub mask_token: ParamId,
    pub gnn: GnnBranch,
    pub text: Option<TextEncoder>,
    pub cross: BiCrossAttention,
    pub head: FusionHead,
}

impl Gmlm {
    pub fn new(config: ModelConfig, dims: DataDims, seed: u64) -> Result<Self> {
        config.validate()?;
        if dims.num_classes < 2 || dims.feature_dim == 0 || dims.num_relations == 0 {
            return Err(validation(alloc::format!("invalid data dimensions {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d_x = dims.feature_dim;
        let mask_token = params.add(
            "mask_token",
            ParamGroup::Other,
            xavier_uniform(&mut rng, &[1, d_x], d_x, d_x),
        );
        let eps = config.layer_norm_eps;
        let gnn = GnnBranch::new(
            &mut params,
            &GnnDims {
                feature_dim: d_x,
                hidden_dim: config.hidden_dim,
                out_dim: config.text_dim,
                num_relations: dims.num_relations,
                keep_prob: config.keep_prob,
                eps,
            },
            &mut rng,
        );
        let text = match dims.text {
            TextInput::Encoder { vocab_size } => {
                if vocab_size < 3 {
                    return Err(validation("vocabulary needs at least the three special tokens"));
                }
                Some(TextEncoder::new(
                    &mut params,
                    TextEncoderConfig {
                        vocab_size,
                        dim: config.text_dim,
                        layers: config.encoder_layers,
                        heads: config.encoder_heads,
                        max_len: config.max_len,
                        ff_dim: config.encoder_ff_dim,
                        eps,
                    },
                    &mut rng,
                )?)
            }
            TextInput::Precomputed { width } => {
                if width != config.text_dim {
                    return Err(validation(alloc::format!(
                        "precomputed embeddings have width {width}, text_dim is {}",
                        config.text_dim
                    )));
                }
                None
            }
        };
        let cross = BiCrossAttention::new(&mut params, config.text_dim, config.attention_heads, &mut rng)?;
        let head = FusionHead::new(
            &mut params,
            config.text_dim,
            config.fused_dim,
            dims.num_classes,
            config.keep_prob,
            eps,
            &mut rng,
        );
        Ok(Self {
            config,
            dims,
            params,
            mask_token,
            gnn,
            text,
            cross,
            head,
        })
    }

    /// Checks that a prepared graph matches the model's data dimensions.
    pub fn check_context(&self, ctx: &GraphContext) -> Result<()> {
        let got = (ctx.features.cols(), ctx.adjacency.num_relations(), ctx.num_classes);
        let want = (self.dims.feature_dim, self.dims.num_relations, self.dims.num_classes);
        if got != want {
            return Err(validation(alloc::format!(
                "graph has (features, relations, classes) = {got:?}, model expects {want:?}"
            )));
        }
        match self.dims.text {
            TextInput::Encoder { .. } if ctx.tokens.is_none() => {
                Err(validation("model uses the built-in text encoder but the graph has no tokens"))
            }
            TextInput::Precomputed { width } => match &ctx.precomputed {
                Some(p) if p.cols() == width => Ok(()),
                Some(p) => Err(validation(alloc::format!(
                    "precomputed embeddings have width {}, model expects {width}",
                    p.cols()
                ))),
                None => Err(validation("model expects precomputed text embeddings")),
            },
            _ => Ok(()),
        }
    }

    /// Whether a parameter is trained during contrastive pretraining.
    pub fn is_pretrain_param(&self, id: ParamId) -> bool {
        id == self.mask_token || self.params.get(id).group == ParamGroup::Graph
    }

    /// Soft-masks the features and runs the graph branch.
    pub fn forward_graph<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        ctx: &GraphContext,
        perturb: Option<&NodeMask>,
        beta: f64,
        rng: Option<&mut R>,
    ) -> Result<GnnOutput> {
        let x = tape.constant(ctx.features.clone());
        let x = match perturb {
            Some(mask) => {
                let token = tape.param(self.mask_token);
                soft_mask(tape, x, mask, beta, token)?
            }
            None => x,
        };
        self.gnn.forward(tape, x, &ctx.adjacency, rng)
    }

    /// The `N x d` text matrix with zero rows outside `active`.
    pub fn forward_text(&self, tape: &mut Tape<'_>, ctx: &GraphContext, active: &NodeMask) -> Result<Var> {
        match (&self.text, &ctx.tokens, &ctx.precomputed) {
            (Some(encoder), Some(tokens), _) => {
                assemble_text_matrix(tape, encoder, tokens, active, self.config.text_micro_batch)
            }
            (None, _, Some(p)) => Ok(tape.constant(gate_precomputed(p, active)?)),
            _ => Err(validation("text source does not match the model")),
        }
    }

    /// Full forward pass. Dropout is active only when `rng` is given.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        ctx: &GraphContext,
        opts: ForwardOptions<'_>,
        mut rng: Option<&mut R>,
    ) -> Result<ForwardOutput> {
        let graph = self.forward_graph(tape, ctx, opts.perturb, opts.beta, rng.as_deref_mut())?;
        let text = self.forward_text(tape, ctx, opts.active)?;
        let key_mask = self.config.mask_inactive_text_keys.then_some(opts.active);
        let (g2t, t2g) = bidirectional_fuse(
            tape,
            graph.embedding,
            text,
            &self.cross,
            self.config.attention_scope,
            key_mask,
        )?;
        let head = fuse_and_classify(tape, g2t, t2g, &self.head, rng)?;
        Ok(ForwardOutput {
            graph,
            text,
            graph_to_text: g2t,
            text_to_graph: t2g,
            head,
        })
    }

    /// Evaluation-mode pass: all nodes active, no perturbation, no dropout.
    pub fn infer(&self, ctx: &GraphContext) -> Result<Inference> {
        let mut tape = Tape::with_params(&self.params);
        let active = NodeMask::all(ctx.num_nodes(), MaskKind::Active);
        let out = self.forward::<ChaCha8Rng>(
            &mut tape,
            ctx,
            ForwardOptions {
                perturb: None,
                beta: 0.0,
                active: &active,
            },
            None,
        )?;
        Ok(Inference {
            graph: tape.value(out.graph.embedding).clone(),
            text: tape.value(out.text).clone(),
            fused: tape.value(out.head.fused).clone(),
            probs: tape.value(out.head.probs).clone(),
        })
    }

    pub fn fusion_weights(&self) -> Vec<f64> {
        self.gnn.fusion_weights(&self.params)
    }
}

/// Plain-value outputs of an evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub graph: Tensor,
    pub text: Tensor,
    pub fused: Tensor,
    pub probs: Tensor,
}

impl Inference {
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.probs.rows())
            .map(|i| {
                let row = self.probs.row(i);
                let mut best = 0;
                for (j, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}
