//! Text-attributed graphs, splits, node masks, and synthetic generation.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{validation, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub relation: usize,
}

impl Edge {
    pub fn new(src: usize, dst: usize, relation: usize) -> Self {
        Self { src, dst, relation }
    }
}

/// Node features, typed directed edges, raw texts, and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TextGraph {
    features: Tensor,
    edges: Vec<Edge>,
    texts: Vec<String>,
    labels: Vec<usize>,
    num_classes: usize,
    num_relations: usize,
}

impl TextGraph {
    /// Validates and builds a graph.
    ///
    /// `features` is `N x d_x`; every edge endpoint must be a node and every
    /// relation id below `num_relations`.
    pub fn new(
        features: Tensor,
        edges: Vec<Edge>,
        texts: Vec<String>,
        labels: Vec<usize>,
        num_classes: usize,
        num_relations: usize,
    ) -> Result<Self> {
        if features.rank() != 2 || features.cols() == 0 {
            return Err(validation(alloc::format!(
                "features must be a non-empty N x d matrix, got {:?}",
                features.shape()
            )));
        }
        let n = features.rows();
        if n == 0 {
            return Err(validation("graph has no nodes"));
        }
        if texts.len() != n {
            return Err(validation(alloc::format!("{} texts for {n} nodes", texts.len())));
        }
        if labels.len() != n {
            return Err(validation(alloc::format!("{} labels for {n} nodes", labels.len())));
        }
        if num_classes < 2 {
            return Err(validation(alloc::format!("need at least 2 classes, got {num_classes}")));
        }
        if num_relations == 0 {
            return Err(validation("need at least one relation"));
        }
        if let Some((i, l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(validation(alloc::format!(
                "node {i} has label {l}, but there are {num_classes} classes"
            )));
        }
        for e in &edges {
            if e.src >= n || e.dst >= n {
                return Err(validation(alloc::format!(
                    "edge ({}, {}) references a node outside [0, {n})",
                    e.src,
                    e.dst
                )));
            }
            if e.relation >= num_relations {
                return Err(validation(alloc::format!(
                    "edge ({}, {}) has relation {} but only {num_relations} relations exist",
                    e.src,
                    e.dst,
                    e.relation
                )));
            }
        }
        Ok(Self {
            features,
            edges,
            texts,
            labels,
            num_classes,
            num_relations,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn texts(&self) -> &[String] {
        &self.texts
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_relations(&self) -> usize {
        self.num_relations
    }

    /// In-degree plus out-degree over all relations.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.num_nodes()];
        for e in &self.edges {
            deg[e.src] += 1;
            deg[e.dst] += 1;
        }
        deg
    }

    /// Fraction of edges whose endpoints carry different labels.
    pub fn edge_heterophily(&self) -> f64 {
        if self.edges.is_empty() {
            return 0.0;
        }
        let cross = self
            .edges
            .iter()
            .filter(|e| self.labels[e.src] != self.labels[e.dst])
            .count();
        cross as f64 / self.edges.len() as f64
    }

    /// Relabels nodes so that old node `i` becomes node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || core::mem::replace(&mut seen[p], true)) {
            return Err(validation("not a permutation of the node ids"));
        }
        let d = self.feature_dim();
        let mut features = Tensor::zeros(&[n, d]);
        let mut texts = vec![String::new(); n];
        let mut labels = vec![0; n];
        for (old, &new) in perm.iter().enumerate() {
            features.row_mut(new).copy_from_slice(self.features.row(old));
            texts[new] = self.texts[old].clone();
            labels[new] = self.labels[old];
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge::new(perm[e.src], perm[e.dst], e.relation))
            .collect();
        Self::new(features, edges, texts, labels, self.num_classes, self.num_relations)
    }
}

/// For every relation `r`, adds relation `r + |R|` holding each edge of `r`
/// reversed. The relation count doubles.
pub fn add_reverse_relations(g: &TextGraph) -> TextGraph {
    let r = g.num_relations;
    let mut edges = g.edges.clone();
    edges.extend(g.edges.iter().map(|e| Edge::new(e.dst, e.src, e.relation + r)));
    TextGraph {
        edges,
        num_relations: 2 * r,
        ..g.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Split {
    Train = 0,
    Val = 1,
    Test = 2,
}

impl Split {
    pub fn from_index(i: u8) -> Option<Self> {
        match i {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "train" => Some(Split::Train),
            "val" | "valid" | "validation" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Train/val/test tag per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub seed: u64,
    pub tags: Vec<Split>,
}

impl SplitAssignment {
    pub fn nodes(&self, split: Split) -> Vec<usize> {
        self.tags
            .iter()
            .enumerate()
            .filter(|(_, &t)| t == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.tags.iter().filter(|&&t| t == split).count()
    }

    pub fn mask(&self, split: Split, kind: MaskKind) -> NodeMask {
        NodeMask {
            bits: self.tags.iter().map(|&t| t == split).collect(),
            kind,
        }
    }
}

/// Floors of `ratios * total` and their fractional parts.
fn apportion(total: usize, ratios: &[f64; 3]) -> ([usize; 3], [f64; 3]) {
    let mut counts = [0usize; 3];
    let mut fracs = [0.0; 3];
    for s in 0..3 {
        let exact = ratios[s] * total as f64;
        counts[s] = libm::floor(exact) as usize;
        fracs[s] = exact - counts[s] as f64;
    }
    (counts, fracs)
}

/// Stratified train/val/test split.
///
/// Each class contributes `floor(n_c * ratio)` nodes to each split; the
/// leftover nodes of a class go to the splits that are furthest below their
/// global target, at most one extra per split per class. Every per-class
/// count is therefore the floor or the ceiling of its exact share.
pub fn make_splits(g: &TextGraph, ratios: [f64; 3], seed: u64) -> Result<SplitAssignment> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || libm::fabs(ratios.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(validation(alloc::format!(
            "split ratios {ratios:?} must be non-negative and sum to 1"
        )));
    }
    let mut by_class = vec![Vec::new(); g.num_classes];
    for (i, &l) in g.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    for (class, nodes) in by_class.iter().enumerate() {
        if nodes.len() < 3 {
            return Err(Error::Stratification {
                class,
                count: nodes.len(),
            });
        }
    }

    let n = g.num_nodes();
    let (mut target, global_fracs) = apportion(n, &ratios);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| global_fracs[b].total_cmp(&global_fracs[a]).then(a.cmp(&b)));
    let mut spare = n - target.iter().sum::<usize>();
    for &s in order.iter().cycle() {
        if spare == 0 {
            break;
        }
        target[s] += 1;
        spare -= 1;
    }

    let mut per_class = Vec::with_capacity(g.num_classes);
    let mut assigned = [0usize; 3];
    for nodes in &by_class {
        let (counts, fracs) = apportion(nodes.len(), &ratios);
        for s in 0..3 {
            assigned[s] += counts[s];
        }
        per_class.push((counts, fracs));
    }
    for (nodes, (counts, fracs)) in by_class.iter().zip(&mut per_class) {
        let mut leftover = nodes.len() - counts.iter().sum::<usize>();
        let mut used = [false; 3];
        while leftover > 0 {
            let s = (0..3)
                .filter(|&s| !used[s])
                .max_by(|&a, &b| {
                    let da = target[a] as i64 - assigned[a] as i64;
                    let db = target[b] as i64 - assigned[b] as i64;
                    da.cmp(&db)
                        .then(fracs[a].total_cmp(&fracs[b]))
                        .then(b.cmp(&a))
                })
                .expect("at most two leftover nodes per class");
            used[s] = true;
            counts[s] += 1;
            assigned[s] += 1;
            leftover -= 1;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tags = vec![Split::Train; n];
    for (nodes, (counts, _)) in by_class.iter().zip(&per_class) {
        let mut shuffled = nodes.clone();
        shuffled.shuffle(&mut rng);
        let (train, rest) = shuffled.split_at(counts[0]);
        let (val, test) = rest.split_at(counts[1]);
        for &i in train {
            tags[i] = Split::Train;
        }
        for &i in val {
            tags[i] = Split::Val;
        }
        for &i in test {
            tags[i] = Split::Test;
        }
    }
    Ok(SplitAssignment { seed, tags })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum MaskKind {
    Perturbation,
    Active,
}

/// One flag per node.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeMask {
    pub bits: Vec<bool>,
    pub kind: MaskKind,
}

impl NodeMask {
    pub fn none(n: usize, kind: MaskKind) -> Self {
        Self {
            bits: vec![false; n],
            kind,
        }
    }

    pub fn all(n: usize, kind: MaskKind) -> Self {
        Self {
            bits: vec![true; n],
            kind,
        }
    }

    pub fn from_indices(n: usize, idx: &[usize], kind: MaskKind) -> Self {
        let mut m = Self::none(n, kind);
        for &i in idx {
            m.bits[i] = true;
        }
        m
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Draws `round(proportion * |eligible|)` distinct eligible nodes (at least
/// one) without replacement, with inclusion weight `degree + 1`.
///
/// Uses exponential keys `ln(u) / w`: the nodes with the largest keys form a
/// weighted sample without replacement.
pub fn degree_weighted_sample<R: Rng + ?Sized>(
    degrees: &[usize],
    eligible: &NodeMask,
    proportion: f64,
    kind: MaskKind,
    rng: &mut R,
) -> Result<NodeMask> {
    if !(proportion > 0.0 && proportion <= 1.0) {
        return Err(Error::Sampling(alloc::format!(
            "proportion {proportion} outside (0, 1]"
        )));
    }
    if degrees.len() != eligible.len() {
        return Err(Error::Sampling(alloc::format!(
            "{} degrees for a mask of length {}",
            degrees.len(),
            eligible.len()
        )));
    }
    let pool = eligible.indices();
    if pool.is_empty() {
        return Err(Error::Sampling("no eligible node".into()));
    }
    let k = (libm::round(proportion * pool.len() as f64) as usize).clamp(1, pool.len());
    let mut keyed: Vec<(f64, usize)> = pool
        .iter()
        .map(|&i| {
            let u: f64 = 1.0 - rng.random::<f64>();
            (libm::log(u) / (degrees[i] + 1) as f64, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let chosen: Vec<usize> = keyed[..k].iter().map(|&(_, i)| i).collect();
    Ok(NodeMask::from_indices(eligible.len(), &chosen, kind))
}

/// Seeded convenience wrapper around [`degree_weighted_sample`].
pub fn degree_weighted_sample_seeded(
    g: &TextGraph,
    eligible: &NodeMask,
    proportion: f64,
    seed: u64,
) -> Result<NodeMask> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    degree_weighted_sample(&g.degrees(), eligible, proportion, eligible.kind, &mut rng)
}

/// Parameters of the synthetic text-graph generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct SyntheticSpec {
    pub num_nodes: usize,
    pub num_classes: usize,
    /// Probability that an edge joins nodes of different classes.
    pub heterophily: f64,
    /// Number of distinct words (`w0`, `w1`, ...).
    pub vocab_size: usize,
    pub feature_dim: usize,
    pub avg_degree: f64,
    /// Scale of the class centroid relative to unit noise.
    pub feature_signal: f64,
    pub words_per_text: usize,
    /// Probability that a word is drawn from the node's class vocabulary.
    pub text_signal: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_nodes: 200,
            num_classes: 4,
            heterophily: 0.8,
            vocab_size: 64,
            feature_dim: 16,
            avg_degree: 4.0,
            feature_signal: 1.0,
            words_per_text: 8,
            text_signal: 0.6,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.heterophily) {
            return Err(validation(alloc::format!(
                "heterophily {} outside [0, 1]",
                self.heterophily
            )));
        }
        if self.num_classes < 2 || self.num_nodes < 2 * self.num_classes {
            return Err(validation(alloc::format!(
                "need at least 2 classes and 2 nodes per class, got {} nodes / {} classes",
                self.num_nodes,
                self.num_classes
            )));
        }
        if self.vocab_size < self.num_classes {
            return Err(validation("vocabulary must have at least one word per class"));
        }
        if self.feature_dim == 0 {
            return Err(validation("feature_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.text_signal) || self.avg_degree < 0.0 {
            return Err(validation("text_signal must lie in [0, 1] and avg_degree be non-negative"));
        }
        Ok(())
    }
}

/// Class-conditional synthetic graph with a single relation.
///
/// Labels are balanced. Features are a class centroid plus unit Gaussian
/// noise. Word `w_k` belongs to class `k mod C`; each word of a text comes
/// from the node's class words with probability `text_signal`, otherwise
/// uniformly from the whole vocabulary. Each edge picks a random source and
/// then a partner from a different class with probability `heterophily`,
/// from the same class otherwise. Node pairs are never repeated.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<TextGraph> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, d) = (spec.num_nodes, spec.num_classes, spec.feature_dim);

    let mut labels: Vec<usize> = (0..n).map(|i| i % c).collect();
    labels.shuffle(&mut rng);

    let centroids: Vec<Vec<f64>> = (0..c)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let mut features = Tensor::zeros(&[n, d]);
    for i in 0..n {
        let centroid = &centroids[labels[i]];
        for (j, v) in features.row_mut(i).iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *v = spec.feature_signal * centroid[j] + noise;
        }
    }

    let class_words: Vec<Vec<usize>> = (0..c)
        .map(|cl| (0..spec.vocab_size).filter(|k| k % c == cl).collect())
        .collect();
    let texts = labels
        .iter()
        .map(|&l| {
            let words: Vec<String> = (0..spec.words_per_text)
                .map(|_| {
                    let k = if rng.random::<f64>() < spec.text_signal {
                        class_words[l][rng.random_range(0..class_words[l].len())]
                    } else {
                        rng.random_range(0..spec.vocab_size)
                    };
                    alloc::format!("w{k}")
                })
                .collect();
            words.join(" ")
        })
        .collect();

    let mut members = vec![Vec::new(); c];
    for (i, &l) in labels.iter().enumerate() {
        members[l].push(i);
    }
    let target = libm::round(n as f64 * spec.avg_degree / 2.0) as usize;
    let mut seen = BTreeSet::new();
    let mut edges = Vec::with_capacity(target);
    let mut attempts = 0;
    while edges.len() < target && attempts < 100 * target + 100 {
        attempts += 1;
        let src = rng.random_range(0..n);
        let cross = rng.random::<f64>() < spec.heterophily;
        let dst = if cross {
            let mut other = rng.random_range(0..c - 1);
            if other >= labels[src] {
                other += 1;
            }
            members[other][rng.random_range(0..members[other].len())]
        } else {
            let same = &members[labels[src]];
            let dst = same[rng.random_range(0..same.len())];
            if dst == src {
                continue;
            }
            dst
        };
        if !seen.insert((src.min(dst), src.max(dst))) {
            continue;
        }
        edges.push(Edge::new(src, dst, 0));
    }
    TextGraph::new(features, edges, texts, labels, c, 1)
}
