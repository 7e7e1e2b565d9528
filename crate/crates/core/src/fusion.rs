//! Bi-directional cross-attention between graph and text embeddings, the
//! fusion network, and the classification head.

use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::NodeMask;
use crate::nn::{dropout, split_heads, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which keys a node's query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum AttentionScope {
    /// Every node attends to all `N` nodes of the other modality.
    #[default]
    Full,
    /// Each node attends only to itself in the other modality.
    Diagonal,
}

/// `softmax(Q K^T / sqrt(d_k) + bias) V`, with `d_k` the width of `Q`.
///
/// `bias` is added to the scores before the softmax and broadcasts like
/// [`Tape::add`]; `-inf` entries exclude keys.
pub fn scaled_dot_attention(tape: &mut Tape<'_>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
    let (dq, dk) = (tape.value(q).cols(), tape.value(k).cols());
    if dq != dk || tape.value(k).rows() != tape.value(v).rows() {
        return Err(crate::Error::Shape {
            op: "attention",
            lhs: tape.value(q).shape().to_vec(),
            rhs: tape.value(k).shape().to_vec(),
        });
    }
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let mut scores = tape.scale(scores, 1.0 / libm::sqrt(dk as f64));
    if let Some(b) = bias {
        scores = tape.add(scores, b)?;
    }
    let probs = tape.softmax(scores)?;
    tape.matmul(probs, v)
}

/// Multi-head attention with query/key/value/output projections.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(crate::error::validation(alloc::format!(
                "attention width {dim} is not divisible by {heads} heads"
            )));
        }
        let g = ParamGroup::Other;
        let mut lin = |part: &str| Linear::new(store, &alloc::format!("{name}.{part}"), g, dim, dim, true, rng);
        Ok(Self {
            query: lin("query"),
            key: lin("key"),
            value: lin("value"),
            out: lin("out"),
            heads,
        })
    }

    /// Attends from `queries` (`N x d`) over `context` (`N x d`).
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        context: Var,
        scope: AttentionScope,
        key_bias: Option<Var>,
    ) -> Result<Var> {
        let v = self.value.forward(tape, context)?;
        let attended = match scope {
            // A single admissible key gets probability exactly 1.
            AttentionScope::Diagonal => v,
            AttentionScope::Full => {
                let q = self.query.forward(tape, queries)?;
                let k = self.key.forward(tape, context)?;
                let qs = split_heads(tape, q, self.heads)?;
                let ks = split_heads(tape, k, self.heads)?;
                let vs = split_heads(tape, v, self.heads)?;
                let mut outs = Vec::with_capacity(self.heads);
                for ((qh, kh), vh) in qs.into_iter().zip(ks).zip(vs) {
                    outs.push(scaled_dot_attention(tape, qh, kh, vh, key_bias)?);
                }
                tape.concat_cols(&outs)?
            }
        };
        self.out.forward(tape, attended)
    }
}

/// The two attention directions.
#[derive(Debug, Clone, PartialEq)]
pub struct BiCrossAttention {
    /// Text queries over graph keys/values.
    pub graph_to_text: CrossAttention,
    /// Graph queries over text keys/values.
    pub text_to_graph: CrossAttention,
}

impl BiCrossAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dim: usize, heads: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            graph_to_text: CrossAttention::new(store, "cross.graph_to_text", dim, heads, rng)?,
            text_to_graph: CrossAttention::new(store, "cross.text_to_graph", dim, heads, rng)?,
        })
    }
}

/// Returns `(H_G->T, H_T->G)`.
///
/// With `text_key_mask`, text rows of nodes outside the mask are excluded as
/// keys of the text-to-graph direction (ignored when the mask is empty).
pub fn bidirectional_fuse(
    tape: &mut Tape<'_>,
    h_graph: Var,
    h_text: Var,
    params: &BiCrossAttention,
    scope: AttentionScope,
    text_key_mask: Option<&NodeMask>,
) -> Result<(Var, Var)> {
    let (ng, nt) = (tape.value(h_graph).rows(), tape.value(h_text).rows());
    if ng != nt {
        return Err(contract(alloc::format!("{ng} graph rows but {nt} text rows")));
    }
    let text_bias = match text_key_mask {
        Some(m) if scope == AttentionScope::Full && m.count() > 0 => {
            let bias = m.bits.iter().map(|&on| if on { 0.0 } else { f64::NEG_INFINITY }).collect();
            Some(tape.constant(Tensor::matrix(1, ng, bias)))
        }
        _ => None,
    };
    let g2t = params.graph_to_text.forward(tape, h_text, h_graph, scope, None)?;
    let t2g = params.text_to_graph.forward(tape, h_graph, h_text, scope, text_bias)?;
    Ok((g2t, t2g))
}

/// Fusion network (linear, LayerNorm, GELU, dropout) and the classifier MLP
/// (linear, GELU, dropout, linear).
#[derive(Debug, Clone, PartialEq)]
pub struct FusionHead {
    pub fuse: Linear,
    pub fuse_norm: LayerNorm,
    pub hidden: Linear,
    pub classifier: Linear,
    pub keep_prob: f64,
}

impl FusionHead {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        text_dim: usize,
        fused_dim: usize,
        num_classes: usize,
        keep_prob: f64,
        eps: f64,
        rng: &mut R,
    ) -> Self {
        let g = ParamGroup::Other;
        Self {
            fuse: Linear::new(store, "head.fuse", g, 2 * text_dim, fused_dim, true, rng),
            fuse_norm: LayerNorm::new(store, "head.fuse_norm", g, fused_dim, eps),
            hidden: Linear::new(store, "head.hidden", g, fused_dim, fused_dim, true, rng),
            classifier: Linear::new(store, "head.classifier", g, fused_dim, num_classes, true, rng),
            keep_prob,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub fused: Var,
    pub logits: Var,
    pub probs: Var,
}

/// Concatenates both attended views per node, fuses, and classifies.
pub fn fuse_and_classify<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    g2t: Var,
    t2g: Var,
    head: &FusionHead,
    mut rng: Option<&mut R>,
) -> Result<HeadOutput> {
    let concat = tape.concat_cols(&[g2t, t2g])?;
    let h = head.fuse.forward(tape, concat)?;
    let h = head.fuse_norm.forward(tape, h)?;
    let h = tape.gelu(h);
    let fused = dropout(tape, h, head.keep_prob, rng.as_deref_mut())?;
    let h = head.hidden.forward(tape, fused)?;
    let h = tape.gelu(h);
    let h = dropout(tape, h, head.keep_prob, rng)?;
    let logits = head.classifier.forward(tape, h)?;
    let probs = tape.softmax(logits)?;
    Ok(HeadOutput { fused, logits, probs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::graph::MaskKind;
    use crate::params::xavier_uniform;
    use alloc::vec;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_matrix(r: usize, c: usize, seed: u64) -> Tensor {
        xavier_uniform(&mut ChaCha8Rng::seed_from_u64(seed), &[r, c], 1, 1).map(|v| 1.5 * v)
    }

    fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let d = q.cols() as f64;
        let mut out = Tensor::zeros(&[q.rows(), v.cols()]);
        for i in 0..q.rows() {
            let scores: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..k.rows() {
                for c in 0..v.cols() {
                    out.set(i, c, out.get(i, c) + e[j] / z * v.get(j, c));
                }
            }
        }
        out
    }

    fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let mut t = Tape::new();
        let (q, k, v) = (t.constant(q.clone()), t.constant(k.clone()), t.constant(v.clone()));
        let y = scaled_dot_attention(&mut t, q, k, v, None).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn attention_examples() {
        let q = Tensor::matrix(2, 2, vec![1.0, 2.0, -3.0, 0.0]);
        let k = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 2.0, -1.0]);
        let v = Tensor::matrix(3, 3, vec![1.0, 2.0, 3.0, 0.0, -1.0, 4.0, 5.0, 5.0, 0.0]);
        assert!(attend(&q, &k, &v).max_abs_diff(&naive_attention(&q, &k, &v)) < 1e-12);
        let single = attend(&q, &k.select_rows(&[0]), &v.select_rows(&[2]));
        assert_eq!(single.row(0), v.row(2));
        assert_eq!(single.row(1), v.row(2));
        let same_keys = attend(&q, &Tensor::full(&[3, 2], 0.5), &v);
        assert!((same_keys.get(0, 0) - 2.0).abs() < 1e-15);
        let mut t = Tape::new();
        let (a, b) = (t.constant(q.clone()), t.constant(v.clone()));
        assert!(scaled_dot_attention(&mut t, a, b, b, None).is_err());
    }

    fn cross(store: &mut ParamStore, dim: usize, heads: usize) -> BiCrossAttention {
        BiCrossAttention::new(store, dim, heads, &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
    }

    fn fuse(
        store: &ParamStore,
        p: &BiCrossAttention,
        hg: &Tensor,
        ht: &Tensor,
        scope: AttentionScope,
        mask: Option<&NodeMask>,
    ) -> (Tensor, Tensor) {
        let mut t = Tape::with_params(store);
        let (g, x) = (t.constant(hg.clone()), t.constant(ht.clone()));
        let (a, b) = bidirectional_fuse(&mut t, g, x, p, scope, mask).unwrap();
        (t.value(a).clone(), t.value(b).clone())
    }

    fn project(store: &ParamStore, lin: &Linear, x: &Tensor) -> Tensor {
        let w = store.value(lin.weight);
        let mut y = x.matmul(w).unwrap();
        if let Some(b) = lin.bias {
            for i in 0..y.rows() {
                for (o, bv) in y.row_mut(i).iter_mut().zip(store.value(b).data()) {
                    *o += bv;
                }
            }
        }
        y
    }

    fn oracle(store: &ParamStore, a: &CrossAttention, queries: &Tensor, context: &Tensor) -> Tensor {
        let q = project(store, &a.query, queries);
        let k = project(store, &a.key, context);
        let v = project(store, &a.value, context);
        project(store, &a.out, &naive_attention(&q, &k, &v))
    }

    #[test]
    fn single_head_matches_oracle() {
        let mut store = ParamStore::new();
        let p = cross(&mut store, 4, 1);
        let (hg, ht) = (rand_matrix(4, 4, 1), rand_matrix(4, 4, 2));
        let (g2t, t2g) = fuse(&store, &p, &hg, &ht, AttentionScope::Full, None);
        assert!(g2t.max_abs_diff(&oracle(&store, &p.graph_to_text, &ht, &hg)) < 1e-12);
        assert!(t2g.max_abs_diff(&oracle(&store, &p.text_to_graph, &hg, &ht)) < 1e-12);
    }

    #[test]
    fn single_node_returns_value_projection() {
        let mut store = ParamStore::new();
        let p = cross(&mut store, 4, 2);
        let (hg, ht) = (rand_matrix(1, 4, 3), rand_matrix(1, 4, 4));
        let (g2t, t2g) = fuse(&store, &p, &hg, &ht, AttentionScope::Full, None);
        let a = &p.graph_to_text;
        let want = project(&store, &a.out, &project(&store, &a.value, &hg));
        assert!(g2t.max_abs_diff(&want) < 1e-14);
        let b = &p.text_to_graph;
        let want = project(&store, &b.out, &project(&store, &b.value, &ht));
        assert!(t2g.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn diagonal_scope_uses_own_row_only() {
        let mut store = ParamStore::new();
        let p = cross(&mut store, 4, 2);
        let (hg, ht) = (rand_matrix(5, 4, 5), rand_matrix(5, 4, 6));
        let (g2t, _) = fuse(&store, &p, &hg, &ht, AttentionScope::Diagonal, None);
        let a = &p.graph_to_text;
        assert!(g2t.max_abs_diff(&project(&store, &a.out, &project(&store, &a.value, &hg))) < 1e-14);
    }

    #[test]
    fn swapping_inputs_swaps_outputs_with_shared_parameters() {
        let mut store = ParamStore::new();
        let p = cross(&mut store, 4, 2);
        let pairs = [
            (p.graph_to_text.query, p.text_to_graph.query),
            (p.graph_to_text.key, p.text_to_graph.key),
            (p.graph_to_text.value, p.text_to_graph.value),
            (p.graph_to_text.out, p.text_to_graph.out),
        ];
        for (src, dst) in pairs {
            *store.value_mut(dst.weight) = store.value(src.weight).clone();
            *store.value_mut(dst.bias.unwrap()) = store.value(src.bias.unwrap()).clone();
        }
        let (hg, ht) = (rand_matrix(3, 4, 7), rand_matrix(3, 4, 8));
        let (a1, b1) = fuse(&store, &p, &hg, &ht, AttentionScope::Full, None);
        let (a2, b2) = fuse(&store, &p, &ht, &hg, AttentionScope::Full, None);
        assert!(a1.max_abs_diff(&b2) < 1e-14 && b1.max_abs_diff(&a2) < 1e-14);
    }

    #[test]
    fn key_mask_hides_inactive_text_rows() {
        let mut store = ParamStore::new();
        let p = cross(&mut store, 4, 2);
        let hg = rand_matrix(4, 4, 9);
        let ht = rand_matrix(4, 4, 10);
        let mut ht2 = ht.clone();
        ht2.row_mut(3).fill(9.0);
        let m = NodeMask::from_indices(4, &[0, 1, 2], MaskKind::Active);
        let (_, a) = fuse(&store, &p, &hg, &ht, AttentionScope::Full, Some(&m));
        let (_, b) = fuse(&store, &p, &hg, &ht2, AttentionScope::Full, Some(&m));
        assert_eq!(a, b);
        let (_, c) = fuse(&store, &p, &hg, &ht2, AttentionScope::Full, None);
        assert_ne!(a, c);
    }

    fn head(store: &mut ParamStore, classes: usize) -> FusionHead {
        FusionHead::new(store, 4, 6, classes, 0.8, 1e-5, &mut ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn classifier_outputs_distributions() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 3);
        let mut t = Tape::with_params(&store);
        let (a, b) = (t.constant(rand_matrix(5, 4, 11)), t.constant(rand_matrix(5, 4, 12)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = fuse_and_classify(&mut t, a, b, &h, Some(&mut rng)).unwrap();
        for r in t.value(out.probs).to_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(t.value(out.fused).shape(), &[5, 6]);
    }

    #[test]
    fn zero_classifier_weights_give_uniform_probabilities() {
        let mut store = ParamStore::new();
        let h = head(&mut store, 2);
        *store.value_mut(h.classifier.weight) = Tensor::zeros(&[6, 2]);
        let mut t = Tape::with_params(&store);
        let (a, b) = (t.constant(rand_matrix(3, 4, 13)), t.constant(rand_matrix(3, 4, 14)));
        let out = fuse_and_classify::<ChaCha8Rng>(&mut t, a, b, &h, None).unwrap();
        assert!(t.value(out.probs).data().iter().all(|&p| p == 0.5));
    }

    #[test]
    fn head_gradients() {
        let mut store = ParamStore::new();
        let p = cross(&mut store, 4, 2);
        let h = head(&mut store, 3);
        let (hg, ht) = (rand_matrix(4, 4, 15), rand_matrix(4, 4, 16));
        let report = grad_check(
            &store,
            None,
            |t| {
                let (g, x) = (t.constant(hg.clone()), t.constant(ht.clone()));
                let (a, b) = bidirectional_fuse(t, g, x, &p, AttentionScope::Full, None)?;
                let mut rng = ChaCha8Rng::seed_from_u64(5);
                let out = fuse_and_classify(t, a, b, &h, Some(&mut rng))?;
                let lp = t.log(out.probs);
                let picked = t.pick_per_row(lp, &[0, 2, 1, 1])?;
                let m = t.mean(picked);
                Ok(t.scale(m, -1.0))
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn joint_permutation_equivariance(seed in 0u64..10_000) {
            use rand::seq::SliceRandom;
            let n = 6;
            let mut store = ParamStore::new();
            let p = cross(&mut store, 4, 2);
            let (hg, ht) = (rand_matrix(n, 4, seed), rand_matrix(n, 4, seed + 1));
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let mut inv = vec![0; n];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let (a, b) = fuse(&store, &p, &hg, &ht, AttentionScope::Full, None);
            let (pa, pb) = fuse(&store, &p, &hg.select_rows(&inv), &ht.select_rows(&inv), AttentionScope::Full, None);
            prop_assert!(pa.max_abs_diff(&a.select_rows(&inv)) < 1e-9);
            prop_assert!(pb.max_abs_diff(&b.select_rows(&inv)) < 1e-9);
        }
    }
}
