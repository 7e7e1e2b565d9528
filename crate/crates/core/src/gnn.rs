//! Graph branch: soft input masking, relational convolutions with GraphNorm
//! and projected residuals, and learnable multi-scale fusion.

use alloc::collections::BTreeSet;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{contract, Result};
use crate::graph::{NodeMask, TextGraph};
use crate::nn::{dropout, LayerNorm, Linear};
use crate::params::{xavier_uniform, ParamGroup, ParamId, ParamStore};
use crate::tape::{SparseRows, Tape, Var};
use crate::tensor::Tensor;

/// Number of stacked relational blocks.
pub const NUM_BLOCKS: usize = 4;

/// Per-relation mean-aggregation operators.
///
/// Row `i` of relation `r` holds weight `1 / c_{i,r}` for every distinct
/// source `j` of an edge `j -> i` under `r`, where `c_{i,r}` is the number of
/// such sources. Nodes without neighbors under `r` have an empty row.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationalAdjacency {
    pub relations: Vec<Arc<SparseRows>>,
}

impl RelationalAdjacency {
    pub fn from_graph(g: &TextGraph) -> Self {
        let n = g.num_nodes();
        let mut sets = vec![vec![BTreeSet::new(); n]; g.num_relations()];
        for e in g.edges() {
            sets[e.relation][e.dst].insert(e.src);
        }
        let relations = sets
            .into_iter()
            .map(|per_node| {
                let rows = per_node
                    .into_iter()
                    .map(|nbrs| {
                        let c = nbrs.len() as f64;
                        nbrs.into_iter().map(|j| (j, 1.0 / c)).collect()
                    })
                    .collect();
                Arc::new(SparseRows { n_cols: n, rows })
            })
            .collect();
        Self { relations }
    }

    pub fn num_relations(&self) -> usize {
        self.relations.len()
    }
}

/// Applies soft masking to node features: masked rows become
/// `(1 - beta) * x_i + beta * e_mask`, others pass through unchanged.
pub fn soft_mask(tape: &mut Tape<'_>, x: Var, mask: &NodeMask, beta: f64, mask_token: Var) -> Result<Var> {
    let d = tape.value(x).cols();
    let token_shape = tape.value(mask_token).shape();
    if token_shape != [1, d] {
        return Err(contract(alloc::format!(
            "mask token shape {token_shape:?} does not match feature width {d}"
        )));
    }
    tape.soft_mask(x, mask_token, &mask.bits, beta)
}

/// Relation weights `W_r` and self-loop weight `W_0`, each `d_in x d_out`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgcnLayer {
    pub relation_weights: Vec<ParamId>,
    pub self_weight: ParamId,
}

impl RgcnLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        num_relations: usize,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Self {
        let relation_weights = (0..num_relations)
            .map(|r| {
                store.add(
                    alloc::format!("{name}.w_rel{r}"),
                    ParamGroup::Graph,
                    xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
                )
            })
            .collect();
        let self_weight = store.add(
            alloc::format!("{name}.w_self"),
            ParamGroup::Graph,
            xavier_uniform(rng, &[d_in, d_out], d_in, d_out),
        );
        Self {
            relation_weights,
            self_weight,
        }
    }
}

/// `h W_0 + sum_r (A_r h) W_r`, i.e. for each node the self-loop term plus,
/// per relation, the mean of its in-neighbors' transformed features. No
/// activation is applied.
pub fn rgcn_forward(tape: &mut Tape<'_>, h: Var, adj: &RelationalAdjacency, layer: &RgcnLayer) -> Result<Var> {
    if adj.num_relations() != layer.relation_weights.len() {
        return Err(contract(alloc::format!(
            "graph has {} relations, layer has {} weights",
            adj.num_relations(),
            layer.relation_weights.len()
        )));
    }
    let w0 = tape.param(layer.self_weight);
    let mut out = tape.matmul(h, w0)?;
    for (a, &w) in adj.relations.iter().zip(&layer.relation_weights) {
        if a.rows.iter().all(Vec::is_empty) {
            continue;
        }
        let agg = tape.sparse_matmul(a, h)?;
        let w = tape.param(w);
        let msg = tape.matmul(agg, w)?;
        out = tape.add(out, msg)?;
    }
    Ok(out)
}

/// Learnable mean-scale `alpha`, scale `gamma`, and shift, each `1 x d`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphNormParams {
    pub alpha: ParamId,
    pub gamma: ParamId,
    pub shift: ParamId,
    pub eps: f64,
}

impl GraphNormParams {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, eps: f64) -> Self {
        let g = ParamGroup::Graph;
        Self {
            alpha: store.add(alloc::format!("{name}.alpha"), g, Tensor::full(&[1, d], 1.0)),
            gamma: store.add(alloc::format!("{name}.gamma"), g, Tensor::full(&[1, d], 1.0)),
            shift: store.add(alloc::format!("{name}.shift"), g, Tensor::zeros(&[1, d])),
            eps,
        }
    }
}

/// Per feature over all nodes:
/// `gamma * (h - alpha * mean) / sqrt(var(h - alpha * mean) + eps) + shift`.
pub fn graph_norm(tape: &mut Tape<'_>, h: Var, p: &GraphNormParams) -> Result<Var> {
    let alpha = tape.param(p.alpha);
    let gamma = tape.param(p.gamma);
    let shift = tape.param(p.shift);
    let mean = tape.mean_rows(h)?;
    let scaled_mean = tape.mul(mean, alpha)?;
    let centered = tape.sub(h, scaled_mean)?;
    let sq = tape.mul(centered, centered)?;
    let var = tape.mean_rows(sq)?;
    let var = tape.add_scalar(var, p.eps);
    let inv_std = tape.powf(var, -0.5);
    let normed = tape.mul(centered, inv_std)?;
    let scaled = tape.mul(normed, gamma)?;
    tape.add(scaled, shift)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnBlock {
    pub rgcn: RgcnLayer,
    pub norm: GraphNormParams,
    pub residual: Linear,
}

/// `Dropout(GELU(GraphNorm(RGCN(h_prev)))) + Proj(h_residual)`.
///
/// Dropout is active only when `rng` is given (training mode).
pub fn gnn_block_forward<R: Rng + ?Sized>(
    tape: &mut Tape<'_>,
    h_prev: Var,
    h_residual: Var,
    adj: &RelationalAdjacency,
    block: &GnnBlock,
    keep_prob: f64,
    rng: Option<&mut R>,
) -> Result<Var> {
    let z = rgcn_forward(tape, h_prev, adj, &block.rgcn)?;
    let z = graph_norm(tape, z, &block.norm)?;
    let z = tape.gelu(z);
    let z = dropout(tape, z, keep_prob, rng)?;
    let res = block.residual.forward(tape, h_residual)?;
    tape.add(z, res)
}

/// Per-layer projections to the text width, softmax-normalized layer
/// weights, and an output LayerNorm.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScaleFusion {
    pub projections: Vec<Linear>,
    pub logits: ParamId,
    pub norm: LayerNorm,
}

/// `LayerNorm(sum_l softmax(logits)_l * Proj_l(H_l))`.
pub fn multi_scale_fuse(tape: &mut Tape<'_>, layers: &[Var], p: &MultiScaleFusion) -> Result<Var> {
    if layers.len() != p.projections.len() || layers.is_empty() {
        return Err(contract(alloc::format!(
            "multi-scale fusion expects {} layer outputs, got {}",
            p.projections.len(),
            layers.len()
        )));
    }
    let logits = tape.param(p.logits);
    let w = tape.softmax(logits)?;
    let mut acc = None;
    for (l, (&h, proj)) in layers.iter().zip(&p.projections).enumerate() {
        let projected = proj.forward(tape, h)?;
        let wl = tape.slice_cols(w, l, l + 1)?;
        let term = tape.mul(projected, wl)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    p.norm.forward(tape, acc.expect("at least one layer"))
}

/// Hyperparameters of the graph branch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GnnDims {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub num_relations: usize,
    pub keep_prob: f64,
    pub eps: f64,
}

/// The full graph branch minus the mask token.
#[derive(Debug, Clone, PartialEq)]
pub struct GnnBranch {
    pub blocks: Vec<GnnBlock>,
    pub fusion: MultiScaleFusion,
    pub keep_prob: f64,
}

/// Per-block outputs and the fused per-node graph embedding.
#[derive(Debug, Clone)]
pub struct GnnOutput {
    pub layers: Vec<Var>,
    pub embedding: Var,
}

impl GnnBranch {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, dims: &GnnDims, rng: &mut R) -> Self {
        let g = ParamGroup::Graph;
        let blocks = (0..NUM_BLOCKS)
            .map(|l| {
                let d_in = if l == 0 { dims.feature_dim } else { dims.hidden_dim };
                // block l (0-based) takes its residual from H^(l-1), with H^(-1) = H^(0) = X'
                let d_res = if l < 2 { dims.feature_dim } else { dims.hidden_dim };
                let name = alloc::format!("gnn.block{}", l + 1);
                GnnBlock {
                    rgcn: RgcnLayer::new(
                        store,
                        &alloc::format!("{name}.rgcn"),
                        dims.num_relations,
                        d_in,
                        dims.hidden_dim,
                        rng,
                    ),
                    norm: GraphNormParams::new(store, &alloc::format!("{name}.norm"), dims.hidden_dim, dims.eps),
                    residual: Linear::new(
                        store,
                        &alloc::format!("{name}.residual"),
                        g,
                        d_res,
                        dims.hidden_dim,
                        true,
                        rng,
                    ),
                }
            })
            .collect();
        let projections = (0..NUM_BLOCKS)
            .map(|l| {
                Linear::new(
                    store,
                    &alloc::format!("gnn.fusion.proj{}", l + 1),
                    g,
                    dims.hidden_dim,
                    dims.out_dim,
                    true,
                    rng,
                )
            })
            .collect();
        let logits = store.add("gnn.fusion.logits", g, Tensor::zeros(&[1, NUM_BLOCKS]));
        let norm = LayerNorm::new(store, "gnn.fusion.norm", g, dims.out_dim, dims.eps);
        Self {
            blocks,
            fusion: MultiScaleFusion {
                projections,
                logits,
                norm,
            },
            keep_prob: dims.keep_prob,
        }
    }

    /// Runs the four blocks on the (already soft-masked) features `x`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        adj: &RelationalAdjacency,
        mut rng: Option<&mut R>,
    ) -> Result<GnnOutput> {
        let mut history = vec![x];
        for (l, block) in self.blocks.iter().enumerate() {
            let prev = history[l];
            let residual = history[l.saturating_sub(1)];
            let h = gnn_block_forward(tape, prev, residual, adj, block, self.keep_prob, rng.as_deref_mut())?;
            history.push(h);
        }
        let layers = history[1..].to_vec();
        let embedding = multi_scale_fuse(tape, &layers, &self.fusion)?;
        Ok(GnnOutput { layers, embedding })
    }

    /// Current softmax-normalized layer weights.
    pub fn fusion_weights(&self, store: &ParamStore) -> Vec<f64> {
        crate::tape::softmax_rows(store.value(self.fusion.logits)).into_data()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::graph::{Edge, MaskKind};
    use alloc::string::String;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type NoRng = ChaCha8Rng;

    fn graph(n: usize, edges: &[(usize, usize, usize)], relations: usize, d: usize, seed: u64) -> TextGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let features = xavier_uniform(&mut rng, &[n, d], 1, 1);
        TextGraph::new(
            features,
            edges.iter().map(|&(s, t, r)| Edge::new(s, t, r)).collect(),
            vec![String::new(); n],
            (0..n).map(|i| i % 2).collect(),
            2,
            relations,
        )
        .unwrap()
    }

    fn mask(n: usize, idx: &[usize]) -> NodeMask {
        NodeMask::from_indices(n, idx, MaskKind::Perturbation)
    }

    fn soft(x: Tensor, token: Tensor, m: &NodeMask, beta: f64) -> Result<Tensor> {
        let mut t = Tape::new();
        let x = t.constant(x);
        let e = t.constant(token);
        let y = soft_mask(&mut t, x, m, beta, e)?;
        Ok(t.value(y).clone())
    }

    #[test]
    fn soft_mask_examples() {
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]);
        let e = Tensor::matrix(1, 2, vec![0.0, 1.0]);
        let y = soft(x.clone(), e.clone(), &mask(1, &[0]), 0.7).unwrap();
        assert!((y.get(0, 0) - 0.3).abs() < 1e-15 && (y.get(0, 1) - 0.7).abs() < 1e-15);
        assert_eq!(soft(x.clone(), e.clone(), &mask(1, &[]), 0.7).unwrap(), x);
        assert_eq!(soft(x.clone(), e.clone(), &mask(1, &[0]), 1.0).unwrap(), e);
        assert_eq!(soft(x.clone(), e.clone(), &mask(1, &[0]), 0.0).unwrap(), x);
        let wrong = Tensor::zeros(&[1, 3]);
        assert!(matches!(soft(x, wrong, &mask(1, &[0]), 0.7), Err(crate::Error::Contract(_))));
    }

    fn layer_with(store: &mut ParamStore, relations: usize, d: usize, w_rel: Tensor, w_self: Tensor) -> RgcnLayer {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = RgcnLayer::new(store, "l", relations, d, d, &mut rng);
        for &w in &layer.relation_weights {
            *store.value_mut(w) = w_rel.clone();
        }
        *store.value_mut(layer.self_weight) = w_self;
        layer
    }

    fn run_rgcn(store: &ParamStore, g: &TextGraph, layer: &RgcnLayer) -> Tensor {
        let adj = RelationalAdjacency::from_graph(g);
        let mut t = Tape::with_params(store);
        let h = t.constant(g.features().clone());
        let y = rgcn_forward(&mut t, h, &adj, layer).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn rgcn_without_edges_and_identity_self_weight_is_identity() {
        let g = graph(3, &[], 1, 2, 1);
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, 1, 2, Tensor::full(&[2, 2], 7.0), Tensor::identity(2));
        assert_eq!(&run_rgcn(&store, &g, &layer), g.features());
    }

    #[test]
    fn rgcn_single_edge() {
        let g = graph(2, &[(0, 1, 0)], 1, 2, 2);
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, 1, 2, Tensor::identity(2), Tensor::zeros(&[2, 2]));
        let y = run_rgcn(&store, &g, &layer);
        assert_eq!(y.row(0), &[0.0, 0.0]);
        assert_eq!(y.row(1), g.features().row(0));
    }

    #[test]
    fn rgcn_averages_neighbors_of_one_relation() {
        let g = graph(3, &[(0, 2, 0), (1, 2, 0), (1, 2, 0)], 1, 2, 3);
        let mut store = ParamStore::new();
        let layer = layer_with(&mut store, 1, 2, Tensor::identity(2), Tensor::zeros(&[2, 2]));
        let y = run_rgcn(&store, &g, &layer);
        let x = g.features();
        for j in 0..2 {
            assert!((y.get(2, j) - 0.5 * (x.get(0, j) + x.get(1, j))).abs() < 1e-15);
        }
    }

    #[test]
    fn rgcn_matches_per_node_loop() {
        let edges = [(0, 1, 0), (2, 1, 0), (3, 1, 1), (1, 0, 1), (2, 3, 0), (0, 3, 1), (1, 3, 1)];
        let g = graph(4, &edges, 2, 3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let layer = RgcnLayer::new(&mut store, "l", 2, 3, 2, &mut rng);
        let y = run_rgcn(&store, &g, &layer);
        let x = g.features();
        for i in 0..4 {
            let w0 = store.value(layer.self_weight);
            let mut want = [0.0; 2];
            for (o, w) in want.iter_mut().enumerate() {
                *w = (0..3).map(|k| x.get(i, k) * w0.get(k, o)).sum();
            }
            for r in 0..2 {
                let nbrs: Vec<usize> = edges.iter().filter(|e| e.1 == i && e.2 == r).map(|e| e.0).collect();
                let wr = store.value(layer.relation_weights[r]);
                for &j in &nbrs {
                    for (o, w) in want.iter_mut().enumerate() {
                        *w += (0..3).map(|k| x.get(j, k) * wr.get(k, o)).sum::<f64>() / nbrs.len() as f64;
                    }
                }
            }
            for o in 0..2 {
                assert!((y.get(i, o) - want[o]).abs() < 1e-12);
            }
        }
    }

    fn norm_params(store: &mut ParamStore, d: usize, eps: f64) -> GraphNormParams {
        GraphNormParams::new(store, "n", d, eps)
    }

    #[test]
    fn graph_norm_standardizes_columns() {
        let mut store = ParamStore::new();
        let p = norm_params(&mut store, 3, 1e-14);
        let mut x = graph(6, &[], 1, 3, 6).features().clone();
        for i in 0..6 {
            x.set(i, 1, 2.5);
        }
        let mut t = Tape::with_params(&store);
        let h = t.constant(x);
        let y = graph_norm(&mut t, h, &p).unwrap();
        let y = t.value(y);
        for j in 0..3 {
            let col: Vec<f64> = (0..6).map(|i| y.get(i, j)).collect();
            let mean = col.iter().sum::<f64>() / 6.0;
            let var = col.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 6.0;
            if j == 1 {
                assert!(col.iter().all(|&v| v == 0.0));
            } else {
                assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn graph_norm_gradients() {
        let mut store = ParamStore::new();
        let p = norm_params(&mut store, 3, 1e-5);
        *store.value_mut(p.alpha) = Tensor::matrix(1, 3, vec![0.3, 1.0, 0.8]);
        *store.value_mut(p.gamma) = Tensor::matrix(1, 3, vec![1.2, -0.7, 0.4]);
        let x = graph(5, &[], 1, 3, 7).features().clone();
        let weights = graph(5, &[], 1, 3, 8).features().clone();
        let report = grad_check(
            &store,
            None,
            |t| {
                let h = t.constant(x.clone());
                let y = graph_norm(t, h, &p)?;
                let w = t.constant(weights.clone());
                let y = t.mul(y, w)?;
                Ok(t.sum(y))
            },
            1e-5,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    fn branch(store: &mut ParamStore, d_x: usize, relations: usize, keep: f64) -> GnnBranch {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        GnnBranch::new(
            store,
            &GnnDims {
                feature_dim: d_x,
                hidden_dim: 4,
                out_dim: 6,
                num_relations: relations,
                keep_prob: keep,
                eps: 1e-5,
            },
            &mut rng,
        )
    }

    #[test]
    fn block_with_zero_residual_is_the_activation_path() {
        let g = graph(5, &[(0, 1, 0), (2, 1, 0), (3, 4, 0)], 1, 3, 10);
        let adj = RelationalAdjacency::from_graph(&g);
        let mut store = ParamStore::new();
        let b = branch(&mut store, 3, 1, 0.5);
        let block = &b.blocks[0];
        let res = block.residual;
        *store.value_mut(res.weight) = Tensor::zeros(&[3, 4]);
        let mut t = Tape::with_params(&store);
        let x = t.constant(g.features().clone());
        let out = gnn_block_forward::<NoRng>(&mut t, x, x, &adj, block, 0.5, None).unwrap();
        let z = rgcn_forward(&mut t, x, &adj, &block.rgcn).unwrap();
        let z = graph_norm(&mut t, z, &block.norm).unwrap();
        let z = t.gelu(z);
        assert_eq!(t.value(out), t.value(z));
        // keep probability 1 leaves training mode deterministic
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let train = gnn_block_forward(&mut t, x, x, &adj, block, 1.0, Some(&mut rng)).unwrap();
        assert_eq!(t.value(train), t.value(z));
    }

    #[test]
    fn four_block_stack_gradients() {
        let edges = [(0, 1, 0), (1, 2, 0), (2, 3, 1), (3, 0, 1), (4, 5, 0), (5, 6, 1), (6, 7, 0), (7, 4, 1), (0, 4, 0)];
        let g = graph(8, &edges, 2, 3, 11);
        let adj = RelationalAdjacency::from_graph(&g);
        let mut store = ParamStore::new();
        let b = branch(&mut store, 3, 2, 0.8);
        let token = store.add("token", ParamGroup::Other, Tensor::matrix(1, 3, vec![0.1, -0.2, 0.3]));
        let weights = graph(8, &[], 1, 6, 12).features().clone();
        let m = mask(8, &[1, 4, 6]);
        let report = grad_check(
            &store,
            None,
            |t| {
                let x = t.constant(g.features().clone());
                let e = t.param(token);
                let x = soft_mask(t, x, &m, 0.7, e)?;
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let out = b.forward(t, x, &adj, Some(&mut rng))?;
                let w = t.constant(weights.clone());
                let y = t.mul(out.embedding, w)?;
                Ok(t.sum(y))
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.worst());
    }

    #[test]
    fn fusion_weights_and_saturation() {
        let g = graph(4, &[(0, 1, 0)], 1, 3, 13);
        let adj = RelationalAdjacency::from_graph(&g);
        let mut store = ParamStore::new();
        let b = branch(&mut store, 3, 1, 1.0);
        assert_eq!(b.fusion_weights(&store), vec![0.25; 4]);
        *store.value_mut(b.fusion.logits) = Tensor::matrix(1, 4, vec![20.0, -20.0, -20.0, -20.0]);
        let w = b.fusion_weights(&store);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let mut t = Tape::with_params(&store);
        let x = t.constant(g.features().clone());
        let out = b.forward::<NoRng>(&mut t, x, &adj, None).unwrap();
        let first = b.fusion.projections[0].forward(&mut t, out.layers[0]).unwrap();
        let first = b.fusion.norm.forward(&mut t, first).unwrap();
        assert!(t.value(out.embedding).max_abs_diff(t.value(first)) < 1e-6);
        assert!(multi_scale_fuse(&mut t, &out.layers[..3], &b.fusion).is_err());
    }

    #[test]
    fn edgeless_output_depends_only_on_self_weight() {
        let g = graph(4, &[], 1, 3, 14);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = RgcnLayer::new(&mut store, "l", 1, 3, 2, &mut rng);
        let before = run_rgcn(&store, &g, &layer);
        *store.value_mut(layer.relation_weights[0]) = Tensor::full(&[3, 2], 100.0);
        assert_eq!(run_rgcn(&store, &g, &layer), before);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn branch_is_permutation_equivariant(seed in 0u64..1000, perm_seed in 0u64..1000) {
            use rand::seq::SliceRandom;
            let n = 7;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let edges: Vec<(usize, usize, usize)> = (0..10).map(|_| (rng.random_range(0..n), rng.random_range(0..n), rng.random_range(0..2))).collect();
            let g = graph(n, &edges, 2, 3, seed);
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut ChaCha8Rng::seed_from_u64(perm_seed));
            let gp = g.permuted(&perm).unwrap();
            let mut store = ParamStore::new();
            let b = branch(&mut store, 3, 2, 0.8);
            let embed = |g: &TextGraph| {
                let adj = RelationalAdjacency::from_graph(g);
                let mut t = Tape::with_params(&store);
                let x = t.constant(g.features().clone());
                let out = b.forward::<NoRng>(&mut t, x, &adj, None).unwrap();
                t.value(out.embedding).clone()
            };
            let (a, p) = (embed(&g), embed(&gp));
            for i in 0..n {
                for j in 0..6 {
                    prop_assert!((a.get(i, j) - p.get(perm[i], j)).abs() < 1e-9);
                }
            }
        }
    }
}
