//! Text branch: tokenizer, a compact pre-norm transformer encoder, masked
//! mean pooling, and assembly of the per-node text matrix with zero rows for
//! inactive nodes.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, validation, Result};
use crate::graph::NodeMask;
use crate::nn::{split_heads, LayerNorm, Linear};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const CLS: u32 = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Token to id map with dense ids; `[PAD]`, `[UNK]`, `[CLS]` take 0, 1, 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: BTreeMap<String, u32>,
}

impl Vocabulary {
    /// Builds a vocabulary from every word in `texts`, ids in sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: alloc::collections::BTreeSet<String> = texts.into_iter().flat_map(words).collect();
        let mut ids = BTreeMap::new();
        for (i, s) in SPECIALS.iter().enumerate() {
            ids.insert(s.to_string(), i as u32);
        }
        for w in words {
            let next = ids.len() as u32;
            ids.entry(w).or_insert(next);
        }
        Self { ids }
    }

    /// Validates an explicit map: specials at 0..3 and ids dense in `[0, V)`.
    pub fn from_map(ids: BTreeMap<String, u32>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if ids.get(*s) != Some(&(i as u32)) {
                return Err(validation(alloc::format!("vocabulary must map {s} to {i}")));
            }
        }
        let mut seen = vec![false; ids.len()];
        for (tok, &id) in &ids {
            let slot = seen
                .get_mut(id as usize)
                .ok_or_else(|| validation(alloc::format!("token {tok:?} has id {id} outside [0, {})", ids.len())))?;
            if core::mem::replace(slot, true) {
                return Err(validation(alloc::format!("id {id} assigned twice")));
            }
        }
        Ok(Self { ids })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn id(&self, token: &str) -> u32 {
        self.ids.get(token).copied().unwrap_or(UNK)
    }

    pub fn map(&self) -> &BTreeMap<String, u32> {
        &self.ids
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_lowercase())
}

/// One tokenized text: ids padded to a fixed length and its attention mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenRow {
    pub ids: Vec<u32>,
    pub mask: Vec<u8>,
}

impl TokenRow {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Drops trailing padding.
    pub fn trimmed(&self) -> TokenRow {
        let end = self.mask.iter().rposition(|&m| m == 1).map_or(0, |p| p + 1);
        TokenRow {
            ids: self.ids[..end].to_vec(),
            mask: self.mask[..end].to_vec(),
        }
    }
}

/// Lowercases, splits on whitespace and punctuation, maps unknown words to
/// `[UNK]`, truncates to `max_len`, and pads with `[PAD]`. An empty text
/// becomes a single `[CLS]`.
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenRow> {
    if max_len < 2 {
        return Err(contract("max_len must be at least 2"));
    }
    let mut ids: Vec<u32> = words(text).take(max_len).map(|w| vocab.id(&w)).collect();
    if ids.is_empty() {
        ids.push(CLS);
    }
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| u8::from(i < real)).collect();
    Ok(TokenRow { ids, mask })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub ff_dim: usize,
    pub eps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlock {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub ff_norm: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Token and position embeddings followed by pre-norm transformer blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub blocks: Vec<EncoderBlock>,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: TextEncoderConfig, rng: &mut R) -> Result<Self> {
        if config.heads == 0 || !config.dim.is_multiple_of(config.heads) {
            return Err(validation(alloc::format!(
                "text width {} is not divisible by {} heads",
                config.dim,
                config.heads
            )));
        }
        let g = ParamGroup::Text;
        let (v, d) = (config.vocab_size, config.dim);
        let token_embedding = store.add("text.token_embedding", g, xavier_uniform(rng, &[v, d], v, d));
        let position_embedding = store.add(
            "text.position_embedding",
            g,
            xavier_uniform(rng, &[config.max_len, d], config.max_len, d),
        );
        let blocks = (0..config.layers)
            .map(|k| {
                let p = alloc::format!("text.block{}", k + 1);
                let lin = |store: &mut ParamStore, part: &str, i, o, rng: &mut R| {
                    Linear::new(store, &alloc::format!("{p}.{part}"), g, i, o, true, rng)
                };
                EncoderBlock {
                    attn_norm: LayerNorm::new(store, &alloc::format!("{p}.attn_norm"), g, d, config.eps),
                    query: lin(store, "query", d, d, rng),
                    key: lin(store, "key", d, d, rng),
                    value: lin(store, "value", d, d, rng),
                    out: lin(store, "out", d, d, rng),
                    ff_norm: LayerNorm::new(store, &alloc::format!("{p}.ff_norm"), g, d, config.eps),
                    ff_in: lin(store, "ff_in", d, config.ff_dim, rng),
                    ff_out: lin(store, "ff_out", config.ff_dim, d, rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    /// Encodes one sequence into its `L x d` last hidden state.
    ///
    /// Attention scores toward `[PAD]` keys are set to `-inf` before the
    /// softmax, so padded positions never influence real tokens.
    pub fn encode(&self, tape: &mut Tape<'_>, row: &TokenRow) -> Result<Var> {
        let len = row.ids.len();
        if len == 0 || len > self.config.max_len || row.mask.len() != len {
            return Err(contract(alloc::format!(
                "sequence length {len} must lie in [1, {}] and match its mask",
                self.config.max_len
            )));
        }
        if let Some(&bad) = row.ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(contract(alloc::format!(
                "token id {bad} outside vocabulary of size {}",
                self.config.vocab_size
            )));
        }
        if !row.mask.contains(&1) {
            return Err(contract("sequence has no real token"));
        }
        let ids: Vec<usize> = row.ids.iter().map(|&i| i as usize).collect();
        let positions: Vec<usize> = (0..len).collect();
        let tok = tape.param(self.token_embedding);
        let pos = tape.param(self.position_embedding);
        let tok = tape.select_rows(tok, &ids)?;
        let pos = tape.select_rows(pos, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let key_bias = Tensor::matrix(
            1,
            len,
            row.mask.iter().map(|&m| if m == 1 { 0.0 } else { f64::NEG_INFINITY }).collect(),
        );
        let key_bias = tape.constant(key_bias);
        for block in &self.blocks {
            let h = block.attn_norm.forward(tape, x)?;
            let attn = self_attention(tape, h, block, self.config.heads, key_bias)?;
            x = tape.add(x, attn)?;
            let h = block.ff_norm.forward(tape, x)?;
            let h = block.ff_in.forward(tape, h)?;
            let h = tape.gelu(h);
            let h = block.ff_out.forward(tape, h)?;
            x = tape.add(x, h)?;
        }
        Ok(x)
    }
}

fn self_attention(tape: &mut Tape<'_>, h: Var, block: &EncoderBlock, heads: usize, key_bias: Var) -> Result<Var> {
    let q = block.query.forward(tape, h)?;
    let k = block.key.forward(tape, h)?;
    let v = block.value.forward(tape, h)?;
    let qs = split_heads(tape, q, heads)?;
    let ks = split_heads(tape, k, heads)?;
    let vs = split_heads(tape, v, heads)?;
    let mut outs = Vec::with_capacity(heads);
    for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
        let dk = tape.value(qh).cols() as f64;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / libm::sqrt(dk));
        let scores = tape.add(scores, key_bias)?;
        let probs = tape.softmax(scores)?;
        outs.push(tape.matmul(probs, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    block.out.forward(tape, cat)
}

/// `(sum_j a_j o_j) / (sum_j a_j)` over the rows of `hidden` (`L x d`).
pub fn masked_mean_pool(tape: &mut Tape<'_>, hidden: Var, mask: &[u8]) -> Result<Var> {
    let len = tape.value(hidden).rows();
    if mask.len() != len {
        return Err(contract(alloc::format!("mask length {} for {len} rows", mask.len())));
    }
    let total: f64 = mask.iter().map(|&m| f64::from(m)).sum();
    if total == 0.0 {
        return Err(contract("attention mask selects no token"));
    }
    let weights = Tensor::matrix(1, len, mask.iter().map(|&m| f64::from(m) / total).collect());
    let weights = tape.constant(weights);
    tape.matmul(weights, hidden)
}

/// Builds the `N x d` text matrix: pooled encodings for active nodes, exact
/// zero rows elsewhere. Active texts are encoded `micro_batch` at a time.
pub fn assemble_text_matrix(
    tape: &mut Tape<'_>,
    encoder: &TextEncoder,
    tokens: &[TokenRow],
    active: &NodeMask,
    micro_batch: usize,
) -> Result<Var> {
    if micro_batch == 0 {
        return Err(contract("micro-batch size must be at least 1"));
    }
    if tokens.len() != active.len() {
        return Err(contract(alloc::format!(
            "{} token rows for a mask of length {}",
            tokens.len(),
            active.len()
        )));
    }
    let n = tokens.len();
    let d = encoder.config.dim;
    let active_idx = active.indices();
    if active_idx.is_empty() {
        return Ok(tape.constant(Tensor::zeros(&[n, d])));
    }
    let mut pooled = Vec::with_capacity(active_idx.len());
    for chunk in active_idx.chunks(micro_batch) {
        for &i in chunk {
            // Trailing padding is masked out of every attention row, so
            // dropping it leaves the real-token states unchanged.
            let row = tokens[i].trimmed();
            let hidden = encoder.encode(tape, &row)?;
            pooled.push(masked_mean_pool(tape, hidden, &row.mask)?);
        }
    }
    let stacked = tape.concat_rows(&pooled)?;
    tape.scatter_rows(stacked, &active_idx, n)
}

/// Zeroes the rows of precomputed embeddings for inactive nodes.
pub fn gate_precomputed(embeddings: &Tensor, active: &NodeMask) -> Result<Tensor> {
    if embeddings.rank() != 2 || embeddings.rows() != active.len() {
        return Err(validation(alloc::format!(
            "embedding matrix {:?} does not have one row per node ({})",
            embeddings.shape(),
            active.len()
        )));
    }
    let mut out = embeddings.clone();
    for (i, &on) in active.bits.iter().enumerate() {
        if !on {
            out.row_mut(i).fill(0.0);
        }
    }
    Ok(out)
}
