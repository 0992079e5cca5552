//! Multiple additive regression trees: least-squares stochastic gradient
//! boosting over small best-first regression trees.
//!
//! Trees are stored in the packed layout used by the model file: one
//! [`PackedNode`] per node, children of an internal node adjacent at
//! `i + offset` and `i + offset + 1`, `offset == 0` marking a leaf.
//! Thresholds and leaf values are single precision and feature values are
//! compared after conversion to `f32`, both while training and at prediction
//! time, so a deserialised model reproduces its source bit for bit.

use std::collections::VecDeque;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureId, FeatureVector, FEATURE_COUNT};

/// Largest leaf budget whose packed child offsets still fit in one byte.
pub const MAX_LEAVES_LIMIT: usize = 128;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub max_leaves: usize,
    pub learning_rate: f64,
    pub subsample_fraction: f64,
    pub min_examples_per_leaf: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 1000,
            max_leaves: 10,
            learning_rate: 0.1,
            subsample_fraction: 0.5,
            min_examples_per_leaf: 2,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.iterations == 0 {
            return bad("iterations must be >= 1".into());
        }
        if !(1..=MAX_LEAVES_LIMIT).contains(&self.max_leaves) {
            return bad(format!("max_leaves must be in 1..={MAX_LEAVES_LIMIT}"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return bad("learning_rate must be in (0, 1]".into());
        }
        if !(self.subsample_fraction > 0.0 && self.subsample_fraction <= 1.0) {
            return bad("subsample_fraction must be in (0, 1]".into());
        }
        if self.min_examples_per_leaf == 0 {
            return bad("min_examples_per_leaf must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PackedNode {
    /// Distance to the left child; 0 for leaves.
    pub offset: u8,
    /// Split feature code; 0 for leaves.
    pub feature: u8,
    /// Threshold for internal nodes, estimate for leaves.
    pub value: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NodeView {
    Split { feature: FeatureId, threshold: f32, left: usize, right: usize },
    Leaf { value: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<PackedNode>,
}

impl Tree {
    pub fn leaf(value: f32) -> Self {
        Tree { nodes: vec![PackedNode { offset: 0, feature: 0, value }] }
    }

    /// Validates a packed node array.
    pub fn from_nodes(nodes: Vec<PackedNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Codec("empty tree".into()));
        }
        for (i, n) in nodes.iter().enumerate() {
            if n.offset == 0 {
                continue;
            }
            if i + n.offset as usize + 1 >= nodes.len() {
                return Err(Error::Codec(format!("child offset out of range at node {i}")));
            }
            if FeatureId::from_code(n.feature).is_none() {
                return Err(Error::Codec(format!("bad split feature {}", n.feature)));
            }
            if !n.value.is_finite() {
                return Err(Error::Codec(format!("non-finite threshold at node {i}")));
            }
        }
        let tree = Tree { nodes };
        // Every node must be reached exactly once from the root.
        let mut seen = vec![false; tree.nodes.len()];
        let mut stack = vec![0usize];
        while let Some(i) = stack.pop() {
            if std::mem::replace(&mut seen[i], true) {
                return Err(Error::Codec("tree nodes are shared".into()));
            }
            if let NodeView::Split { left, right, .. } = tree.view(i) {
                stack.extend([left, right]);
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Codec("unreachable tree nodes".into()));
        }
        Ok(tree)
    }

    pub fn nodes(&self) -> &[PackedNode] {
        &self.nodes
    }

    pub fn view(&self, i: usize) -> NodeView {
        let n = self.nodes[i];
        if n.offset == 0 {
            NodeView::Leaf { value: n.value }
        } else {
            let left = i + n.offset as usize;
            NodeView::Split {
                feature: FeatureId::from_code(n.feature).expect("validated feature code"),
                threshold: n.value,
                left,
                right: left + 1,
            }
        }
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| n.offset == 0).count()
    }

    pub fn depth(&self) -> usize {
        fn go(t: &Tree, i: usize) -> usize {
            match t.view(i) {
                NodeView::Leaf { .. } => 0,
                NodeView::Split { left, right, .. } => 1 + go(t, left).max(go(t, right)),
            }
        }
        go(self, 0)
    }

    fn referenced_mask(&self) -> u32 {
        self.nodes.iter().filter(|n| n.offset != 0).fold(0, |m, n| m | 1 << n.feature)
    }

    /// Evaluates the tree on feature values indexed by feature code.
    #[inline]
    pub fn eval(&self, values: &[f32; FEATURE_COUNT]) -> f32 {
        let mut i = 0usize;
        loop {
            let n = self.nodes[i];
            if n.offset == 0 {
                return n.value;
            }
            i += n.offset as usize + usize::from(values[n.feature as usize] > n.value);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureRange {
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MartModel {
    pub init: f64,
    pub learning_rate: f64,
    schema: Vec<FeatureId>,
    stats: Vec<FeatureRange>,
    trees: Vec<Tree>,
    referenced: u32,
    // All trees back to back, for cache-friendly prediction. Child offsets
    // are relative, so they stay valid after concatenation.
    flat: Vec<PackedNode>,
    roots: Vec<u32>,
}

impl MartModel {
    pub fn from_parts(
        init: f64,
        learning_rate: f64,
        schema: Vec<FeatureId>,
        stats: Vec<FeatureRange>,
        trees: Vec<Tree>,
    ) -> Result<Self> {
        if schema.len() != stats.len() {
            return Err(Error::SchemaMismatch("one range per schema feature".into()));
        }
        if stats.iter().any(|r| !(r.low <= r.high)) {
            return Err(Error::SchemaMismatch("feature range with low > high".into()));
        }
        let referenced = trees.iter().fold(0, |m, t| m | t.referenced_mask());
        let schema_mask = schema.iter().fold(0u32, |m, f| m | 1 << f.code());
        if referenced & !schema_mask != 0 {
            return Err(Error::SchemaMismatch("tree splits on a feature outside the schema".into()));
        }
        let mut flat = Vec::with_capacity(trees.iter().map(|t| t.nodes.len()).sum());
        let mut roots = Vec::with_capacity(trees.len());
        for t in &trees {
            roots.push(flat.len() as u32);
            flat.extend_from_slice(&t.nodes);
        }
        Ok(MartModel { init, learning_rate, schema, stats, trees, referenced, flat, roots })
    }

    /// Input features, in code order.
    pub fn schema(&self) -> &[FeatureId] {
        &self.schema
    }

    pub fn trees(&self) -> &[Tree] {
        &self.trees
    }

    /// Training range of each schema feature.
    pub fn feature_stats(&self) -> impl Iterator<Item = (FeatureId, FeatureRange)> + '_ {
        self.schema.iter().copied().zip(self.stats.iter().copied())
    }

    pub fn range_of(&self, f: FeatureId) -> Option<FeatureRange> {
        self.schema.iter().position(|g| *g == f).map(|i| self.stats[i])
    }

    pub fn predict(&self, fv: &FeatureVector) -> Result<f64> {
        let missing = self.referenced & !fv.mask();
        if missing != 0 {
            let code = missing.trailing_zeros() as u8;
            let f = FeatureId::from_code(code).expect("mask bit is a feature code");
            return Err(Error::MissingFeature(f.name().to_string()));
        }
        let mut values = [0f32; FEATURE_COUNT];
        for (v, raw) in values.iter_mut().zip(fv.raw()) {
            *v = *raw as f32;
        }
        Ok(self.predict_values(&values))
    }

    #[inline]
    fn predict_values(&self, values: &[f32; FEATURE_COUNT]) -> f64 {
        let flat = &self.flat[..];
        let mut sum = 0.0;
        for &root in &self.roots {
            let mut i = root as usize;
            loop {
                let n = flat[i];
                if n.offset == 0 {
                    sum += f64::from(n.value);
                    break;
                }
                i += n.offset as usize + usize::from(values[n.feature as usize] > n.value);
            }
        }
        self.init + self.learning_rate * sum
    }
}

/// Column-major training matrix with per-column presorted row orders.
struct Dataset {
    schema: Vec<FeatureId>,
    cols: Vec<Vec<f32>>,
    sorted: Vec<Vec<u32>>,
    rows: Vec<[f32; FEATURE_COUNT]>,
}

impl Dataset {
    fn new(examples: &[(FeatureVector, f64)]) -> Result<Self> {
        let first = examples.first().ok_or(Error::EmptyTrainingSet)?;
        let mask = first.0.mask();
        if let Some((fv, _)) = examples.iter().find(|(fv, _)| fv.mask() != mask) {
            return Err(Error::SchemaMismatch(format!(
                "examples disagree on features: {:?} vs {:?}",
                first.0.features().collect::<Vec<_>>(),
                fv.features().collect::<Vec<_>>()
            )));
        }
        let schema: Vec<FeatureId> = first.0.features().collect();
        let mut cols = Vec::with_capacity(schema.len());
        let mut sorted = Vec::with_capacity(schema.len());
        for f in &schema {
            let col: Vec<f32> = examples.iter().map(|(fv, _)| fv.raw()[*f as usize] as f32).collect();
            let mut order: Vec<u32> = (0..examples.len() as u32).collect();
            order.sort_by(|a, b| col[*a as usize].total_cmp(&col[*b as usize]).then(a.cmp(b)));
            cols.push(col);
            sorted.push(order);
        }
        let rows = examples
            .iter()
            .map(|(fv, _)| {
                let mut r = [0f32; FEATURE_COUNT];
                for (v, raw) in r.iter_mut().zip(fv.raw()) {
                    *v = *raw as f32;
                }
                r
            })
            .collect();
        Ok(Dataset { schema, cols, sorted, rows })
    }
}

#[derive(Clone, Copy)]
struct Split {
    col: usize,
    threshold: f32,
    gain: f64,
}

struct GrowingLeaf {
    arena: usize,
    lists: Vec<Vec<u32>>,
    sum: f64,
    best: Option<Split>,
}

enum BuildNode {
    Leaf(f64),
    Split { col: usize, threshold: f32, left: usize, right: usize },
}

fn best_split(ds: &Dataset, residuals: &[f64], lists: &[Vec<u32>], sum: f64, min_leaf: usize) -> Option<Split> {
    let count = lists.first().map_or(0, Vec::len);
    if count < 2 * min_leaf || count < 2 {
        return None;
    }
    let sumsq: f64 = lists[0].iter().map(|&i| residuals[i as usize].powi(2)).sum();
    let parent = sum * sum / count as f64;
    // Gains at round-off level are not reductions.
    let floor = 1e-12 * sumsq;
    let mut best: Option<Split> = None;
    for (col, list) in lists.iter().enumerate() {
        let vals = &ds.cols[col];
        let mut left_sum = 0.0;
        for i in 0..count - 1 {
            let idx = list[i] as usize;
            left_sum += residuals[idx];
            let n_left = i + 1;
            let n_right = count - n_left;
            if n_right < min_leaf {
                break;
            }
            if n_left < min_leaf {
                continue;
            }
            let a = vals[idx];
            let b = vals[list[i + 1] as usize];
            if a >= b {
                continue;
            }
            let right_sum = sum - left_sum;
            let gain = left_sum * left_sum / n_left as f64 + right_sum * right_sum / n_right as f64 - parent;
            let better = match best {
                None => gain > floor,
                // Near-equal gains keep the earlier (lower code, lower threshold) split.
                Some(s) => gain > s.gain + 1e-9 * s.gain.abs(),
            };
            if better {
                let mut threshold = ((f64::from(a) + f64::from(b)) * 0.5) as f32;
                if threshold >= b {
                    threshold = a;
                }
                best = Some(Split { col, threshold, gain });
            }
        }
    }
    best
}

/// Grows one best-first tree on `residuals` restricted to the rows in
/// `lists` (one presorted row list per schema column).
fn grow_tree(
    ds: &Dataset,
    residuals: &[f64],
    root_lists: Vec<Vec<u32>>,
    max_leaves: usize,
    min_leaf: usize,
    go_left: &mut [bool],
) -> Tree {
    let root_sum: f64 = root_lists.first().map(|l| l.iter().map(|&i| residuals[i as usize]).sum()).unwrap_or(0.0);
    let root_count = root_lists.first().map_or(0, Vec::len);
    let mut arena = vec![BuildNode::Leaf(0.0)];
    let mut frontier = vec![GrowingLeaf {
        arena: 0,
        best: if max_leaves > 1 { best_split(ds, residuals, &root_lists, root_sum, min_leaf) } else { None },
        lists: root_lists,
        sum: root_sum,
    }];
    let mut leaves = 1;
    if ds.schema.is_empty() {
        // No features: a single leaf at the mean.
        let mean = if root_count > 0 { root_sum / root_count as f64 } else { 0.0 };
        return Tree::leaf(mean as f32);
    }

    while leaves < max_leaves {
        // Highest gain wins; ties go to the leaf created first (frontier order).
        let mut pick: Option<(usize, f64)> = None;
        for (i, leaf) in frontier.iter().enumerate() {
            if let Some(s) = leaf.best {
                if pick.is_none_or(|(_, g)| s.gain > g + 1e-9 * g.abs()) {
                    pick = Some((i, s.gain));
                }
            }
        }
        let Some((pos, _)) = pick else { break };
        let leaf = frontier.remove(pos);
        let split = leaf.best.expect("picked leaf has a split");
        let vals = &ds.cols[split.col];
        for &idx in &leaf.lists[split.col] {
            go_left[idx as usize] = vals[idx as usize] <= split.threshold;
        }
        let mut left_lists = Vec::with_capacity(leaf.lists.len());
        let mut right_lists = Vec::with_capacity(leaf.lists.len());
        for list in &leaf.lists {
            let (l, r): (Vec<u32>, Vec<u32>) = list.iter().partition(|&&i| go_left[i as usize]);
            left_lists.push(l);
            right_lists.push(r);
        }
        let left_sum: f64 = left_lists[0].iter().map(|&i| residuals[i as usize]).sum();
        let right_sum: f64 = right_lists[0].iter().map(|&i| residuals[i as usize]).sum();
        let left_idx = arena.len();
        arena.push(BuildNode::Leaf(0.0));
        arena.push(BuildNode::Leaf(0.0));
        arena[leaf.arena] =
            BuildNode::Split { col: split.col, threshold: split.threshold, left: left_idx, right: left_idx + 1 };
        leaves += 1;
        for (arena_idx, lists, sum) in [(left_idx, left_lists, left_sum), (left_idx + 1, right_lists, right_sum)] {
            let best = if leaves < max_leaves { best_split(ds, residuals, &lists, sum, min_leaf) } else { None };
            frontier.push(GrowingLeaf { arena: arena_idx, lists, sum, best });
        }
    }
    for leaf in &frontier {
        let count = leaf.lists[0].len();
        arena[leaf.arena] = BuildNode::Leaf(if count > 0 { leaf.sum / count as f64 } else { 0.0 });
    }
    pack(ds, &arena)
}

/// Lays the arena out breadth-first so siblings are adjacent.
fn pack(ds: &Dataset, arena: &[BuildNode]) -> Tree {
    let mut nodes = Vec::with_capacity(arena.len());
    let mut queue = VecDeque::from([0usize]);
    let mut next_free = 1usize;
    while let Some(a) = queue.pop_front() {
        let pos = nodes.len();
        match arena[a] {
            BuildNode::Leaf(v) => nodes.push(PackedNode { offset: 0, feature: 0, value: v as f32 }),
            BuildNode::Split { col, threshold, left, right } => {
                let offset = next_free - pos;
                nodes.push(PackedNode {
                    offset: u8::try_from(offset).expect("leaf budget keeps offsets in a byte"),
                    feature: ds.schema[col].code(),
                    value: threshold,
                });
                next_free += 2;
                queue.push_back(left);
                queue.push_back(right);
            }
        }
    }
    Tree { nodes }
}

fn full_lists(ds: &Dataset) -> Vec<Vec<u32>> {
    ds.sorted.clone()
}

/// Fits one regression tree to `(features, residual)` pairs. Every example
/// must carry the same feature set.
pub fn fit_tree(examples: &[(FeatureVector, f64)], max_leaves: usize, min_per_leaf: usize) -> Result<Tree> {
    if !(1..=MAX_LEAVES_LIMIT).contains(&max_leaves) || min_per_leaf == 0 {
        return Err(Error::InvalidConfig("bad tree limits".into()));
    }
    let ds = Dataset::new(examples)?;
    let residuals: Vec<f64> = examples.iter().map(|(_, r)| *r).collect();
    let mut go_left = vec![false; examples.len()];
    let lists = if ds.schema.is_empty() { vec![(0..examples.len() as u32).collect()] } else { full_lists(&ds) };
    Ok(grow_tree(&ds, &residuals, lists, max_leaves, min_per_leaf, &mut go_left))
}

pub fn train(examples: &[(FeatureVector, f64)], cfg: &TrainConfig) -> Result<MartModel> {
    train_traced(examples, cfg).map(|(m, _)| m)
}

/// Trains a model and returns the training RMSE after each iteration.
pub fn train_traced(examples: &[(FeatureVector, f64)], cfg: &TrainConfig) -> Result<(MartModel, Vec<f64>)> {
    cfg.validate()?;
    let ds = Dataset::new(examples)?;
    let n = examples.len();
    let targets: Vec<f64> = examples.iter().map(|(_, y)| *y).collect();
    if let Some(bad) = targets.iter().find(|y| !y.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite training target {bad}")));
    }
    let init = targets.iter().sum::<f64>() / n as f64;

    let stats: Vec<FeatureRange> = ds
        .schema
        .iter()
        .map(|f| {
            let (low, high) = examples
                .iter()
                .map(|(fv, _)| fv.raw()[*f as usize])
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            FeatureRange { low, high }
        })
        .collect();

    let lr = cfg.learning_rate;
    let mut tree_sum = vec![0f64; n];
    let mut residuals: Vec<f64> = targets.iter().map(|y| y - init).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let sample_size = ((cfg.subsample_fraction * n as f64).round() as usize).clamp(1, n);
    let mut in_sample = vec![true; n];
    let mut go_left = vec![false; n];
    let mut trees = Vec::with_capacity(cfg.iterations);
    let mut trace = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let lists = if ds.schema.is_empty() {
            vec![(0..n as u32).collect()]
        } else if sample_size == n {
            full_lists(&ds)
        } else {
            in_sample.iter_mut().for_each(|s| *s = false);
            for i in rand::seq::index::sample(&mut rng, n, sample_size) {
                in_sample[i] = true;
            }
            ds.sorted.iter().map(|order| order.iter().copied().filter(|&i| in_sample[i as usize]).collect()).collect()
        };
        let tree = grow_tree(&ds, &residuals, lists, cfg.max_leaves, cfg.min_examples_per_leaf, &mut go_left);
        let mut sq = 0.0;
        for i in 0..n {
            tree_sum[i] += f64::from(tree.eval(&ds.rows[i]));
            residuals[i] = targets[i] - (init + lr * tree_sum[i]);
            sq += residuals[i] * residuals[i];
        }
        trace.push((sq / n as f64).sqrt());
        trees.push(tree);
    }

    let model = MartModel::from_parts(init, lr, ds.schema, stats, trees)?;
    Ok((model, trace))
}
