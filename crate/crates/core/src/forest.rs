//! Random forest classifier with class-balanced Gini splits, stratified
//! bootstrap resampling, probability output, and out-of-bag scoring.
//!
//! Per-tree randomness is derived from the config seed plus the tree
//! index, so parallel and serial fits are bitwise identical.

use std::path::Path;

use ndarray::ArrayView2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{derive_seed_indexed, seeded_rng};

/// Forest hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// Features sampled per split; `None` means floor(sqrt(d)).
    pub max_features: Option<usize>,
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Stratified bootstrap with replacement; disabling it trains every
    /// tree on the full set (used by OOB edge-case tests).
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 1000,
            max_features: None,
            max_depth: None,
            min_samples_leaf: 1,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn check(&self, d: usize) -> Result<()> {
        if self.n_trees == 0 {
            return Err(CoreError::InvalidInput("n_trees must be >= 1".into()));
        }
        if let Some(m) = self.max_features {
            if m == 0 || m > d {
                return Err(CoreError::InvalidInput(format!("max_features {m} outside [1, {d}]")));
            }
        }
        if self.min_samples_leaf == 0 {
            return Err(CoreError::InvalidInput("min_samples_leaf must be >= 1".into()));
        }
        Ok(())
    }

    fn features_per_split(&self, d: usize) -> usize {
        self.max_features.unwrap_or_else(|| ((d as f64).sqrt().floor() as usize).clamp(1, d))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split { feature: u32, threshold: f64, left: u32, right: u32 },
    /// Weighted class distribution; sums to 1.
    Leaf { dist: [f64; 2] },
}

/// A single CART tree over binary labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    pub fn leaf(dist: [f64; 2]) -> Self {
        Self { nodes: vec![Node::Leaf { dist }] }
    }

    /// Class distribution at the leaf reached by `x`.
    pub fn predict_dist(&self, x: &[f64]) -> [f64; 2] {
        let mut i = 0usize;
        loop {
            match &self.nodes[i] {
                Node::Leaf { dist } => return *dist,
                Node::Split { feature, threshold, left, right } => {
                    i = if x[*feature as usize] < *threshold { *left as usize } else { *right as usize };
                }
            }
        }
    }
}

/// Trained ensemble plus per-tree out-of-bag indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    /// For each tree, the training-sample indices absent from its bootstrap.
    pub oob_indices: Vec<Vec<u32>>,
    pub config: ForestConfig,
    pub n_features: usize,
}

/// Balanced class weights w_c = n / (2 * n_c) from the full label set.
pub fn class_weights(y: &[u8]) -> Result<[f64; 2]> {
    let n1 = y.iter().filter(|&&v| v == 1).count();
    let n0 = y.len() - n1;
    if n0 == 0 || n1 == 0 {
        return Err(CoreError::InvalidInput("both classes must be present".into()));
    }
    let n = y.len() as f64;
    Ok([n / (2.0 * n0 as f64), n / (2.0 * n1 as f64)])
}

fn check_inputs(x: &ArrayView2<'_, f64>, y: &[u8]) -> Result<()> {
    let (n, _d) = x.dim();
    if n != y.len() {
        return Err(CoreError::DimensionMismatch {
            expected: format!("{n} labels"),
            actual: format!("{}", y.len()),
        });
    }
    if n < 2 {
        return Err(CoreError::InvalidInput("need at least 2 samples".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::InvalidInput("non-finite feature value".into()));
    }
    if y.iter().any(|&v| v > 1) {
        return Err(CoreError::InvalidInput("labels must be 0 or 1".into()));
    }
    Ok(())
}

/// Stratified bootstrap: n_c draws with replacement per class, so the
/// resample's class proportions equal the parent's exactly.
fn stratified_bootstrap(y: &[u8], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let class0: Vec<usize> = y.iter().enumerate().filter(|(_, &v)| v == 0).map(|(i, _)| i).collect();
    let class1: Vec<usize> = y.iter().enumerate().filter(|(_, &v)| v == 1).map(|(i, _)| i).collect();
    let mut sample = Vec::with_capacity(y.len());
    for class in [&class0, &class1] {
        for _ in 0..class.len() {
            sample.push(class[rng.gen_range(0..class.len())]);
        }
    }
    sample
}

struct TreeBuilder<'a, 'b> {
    x: &'a ArrayView2<'b, f64>,
    weights: [f64; 2],
    y: &'a [u8],
    m_try: usize,
    max_depth: Option<usize>,
    min_samples_leaf: usize,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    score: f64,
}

impl<'a, 'b> TreeBuilder<'a, 'b> {
    fn build(&self, indices: &[usize], rng: &mut ChaCha8Rng) -> DecisionTree {
        let mut nodes = Vec::new();
        self.grow(indices, 0, rng, &mut nodes);
        DecisionTree { nodes }
    }

    fn node_weights(&self, indices: &[usize]) -> [f64; 2] {
        let mut w = [0.0; 2];
        for &i in indices {
            w[self.y[i] as usize] += self.weights[self.y[i] as usize];
        }
        w
    }

    fn gini(w: &[f64; 2]) -> f64 {
        let total = w[0] + w[1];
        if total <= 0.0 {
            return 0.0;
        }
        let p0 = w[0] / total;
        let p1 = w[1] / total;
        1.0 - p0 * p0 - p1 * p1
    }

    /// Appends the subtree for `indices`, returns its root position.
    fn grow(&self, indices: &[usize], depth: usize, rng: &mut ChaCha8Rng, nodes: &mut Vec<Node>) -> u32 {
        let w = self.node_weights(indices);
        let impurity = Self::gini(&w);
        let make_leaf = |nodes: &mut Vec<Node>| -> u32 {
            let total = w[0] + w[1];
            let dist = [w[0] / total, w[1] / total];
            nodes.push(Node::Leaf { dist });
            (nodes.len() - 1) as u32
        };
        let depth_capped = self.max_depth.map_or(false, |cap| depth >= cap);
        if impurity <= 0.0 || indices.len() < 2 * self.min_samples_leaf || depth_capped {
            return make_leaf(nodes);
        }
        let features = sample_features(rng, self.x.ncols(), self.m_try);
        let best = self.best_split(indices, &features);
        let Some(best) = best else {
            return make_leaf(nodes);
        };
        if best.score >= impurity - 1e-12 {
            return make_leaf(nodes);
        }
        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            indices.iter().partition(|&&i| self.x[[i, best.feature]] < best.threshold);
        let pos = nodes.len();
        nodes.push(Node::Split { feature: best.feature as u32, threshold: best.threshold, left: 0, right: 0 });
        let left = self.grow(&left_idx, depth + 1, rng, nodes);
        let right = self.grow(&right_idx, depth + 1, rng, nodes);
        if let Node::Split { left: l, right: r, .. } = &mut nodes[pos] {
            *l = left;
            *r = right;
        }
        pos as u32
    }

    /// Best candidate over the sampled features; thresholds are midpoints
    /// between consecutive distinct sorted values, impurity ties resolved
    /// toward the smaller threshold (and earlier sampled feature).
    fn best_split(&self, indices: &[usize], features: &[usize]) -> Option<BestSplit> {
        let mut best: Option<BestSplit> = None;
        let mut pairs: Vec<(f64, u8)> = Vec::with_capacity(indices.len());
        for &f in features {
            pairs.clear();
            pairs.extend(indices.iter().map(|&i| (self.x[[i, f]], self.y[i])));
            pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
            let total = self.node_weights(indices);
            let total_n = pairs.len();
            let mut left_w = [0.0f64; 2];
            let mut left_n = 0usize;
            let mut i = 0usize;
            while i < total_n {
                // Absorb the whole tie group before proposing a threshold.
                let v = pairs[i].0;
                while i < total_n && pairs[i].0 == v {
                    left_w[pairs[i].1 as usize] += self.weights[pairs[i].1 as usize];
                    left_n += 1;
                    i += 1;
                }
                if i == total_n {
                    break;
                }
                if left_n < self.min_samples_leaf || total_n - left_n < self.min_samples_leaf {
                    continue;
                }
                let threshold = (v + pairs[i].0) / 2.0;
                let right_w = [total[0] - left_w[0], total[1] - left_w[1]];
                let wl = left_w[0] + left_w[1];
                let wr = right_w[0] + right_w[1];
                let score = (wl * Self::gini(&left_w) + wr * Self::gini(&right_w)) / (wl + wr);
                let better = match &best {
                    None => true,
                    Some(b) => score < b.score - 1e-15,
                };
                if better {
                    best = Some(BestSplit { feature: f, threshold, score });
                }
            }
        }
        best
    }
}

/// Partial Fisher-Yates draw of `m` distinct feature indices.
fn sample_features(rng: &mut ChaCha8Rng, d: usize, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d).collect();
    for i in 0..m.min(d) {
        let j = rng.gen_range(i..d);
        idx.swap(i, j);
    }
    idx.truncate(m.min(d));
    idx
}

fn fit_one_tree(
    x: &ArrayView2<'_, f64>,
    y: &[u8],
    weights: [f64; 2],
    config: &ForestConfig,
    tree_index: usize,
    injected: Option<&[usize]>,
) -> (DecisionTree, Vec<u32>) {
    let mut rng = seeded_rng(derive_seed_indexed(config.seed, "forest-tree", tree_index as u64));
    let n = y.len();
    let sample: Vec<usize> = match injected {
        Some(s) => s.to_vec(),
        None if config.bootstrap => stratified_bootstrap(y, &mut rng),
        None => (0..n).collect(),
    };
    let mut in_bag = vec![false; n];
    for &i in &sample {
        in_bag[i] = true;
    }
    let oob: Vec<u32> = (0..n).filter(|&i| !in_bag[i]).map(|i| i as u32).collect();
    let builder = TreeBuilder {
        x,
        weights,
        y,
        m_try: config.features_per_split(x.ncols()),
        max_depth: config.max_depth,
        min_samples_leaf: config.min_samples_leaf,
    };
    (builder.build(&sample, &mut rng), oob)
}

fn fit_impl(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    config: &ForestConfig,
    injected: Option<&[Vec<usize>]>,
    parallel: bool,
) -> Result<ForestModel> {
    check_inputs(&x, y)?;
    config.check(x.ncols())?;
    let weights = class_weights(y)?;
    if let Some(inj) = injected {
        if inj.len() != config.n_trees {
            return Err(CoreError::InvalidInput("one resample per tree required".into()));
        }
    }
    let fit_tree = |t: usize| fit_one_tree(&x, y, weights, config, t, injected.map(|inj| inj[t].as_slice()));
    let results: Vec<(DecisionTree, Vec<u32>)> = if parallel {
        (0..config.n_trees).into_par_iter().map(fit_tree).collect()
    } else {
        (0..config.n_trees).map(fit_tree).collect()
    };
    let mut trees = Vec::with_capacity(config.n_trees);
    let mut oob_indices = Vec::with_capacity(config.n_trees);
    for (tree, oob) in results {
        trees.push(tree);
        oob_indices.push(oob);
    }
    Ok(ForestModel { trees, oob_indices, config: config.clone(), n_features: x.ncols() })
}

/// Fit a class-balanced forest on an n x d matrix and binary labels.
pub fn fit_forest(x: ArrayView2<'_, f64>, y: &[u8], config: &ForestConfig) -> Result<ForestModel> {
    fit_impl(x, y, config, None, true)
}

/// Serial variant; bitwise identical to [`fit_forest`].
pub fn fit_forest_serial(x: ArrayView2<'_, f64>, y: &[u8], config: &ForestConfig) -> Result<ForestModel> {
    fit_impl(x, y, config, None, false)
}

/// Test hook: fit with explicit per-tree resample indices instead of the
/// seed-driven bootstrap.
pub fn fit_forest_with_resamples(
    x: ArrayView2<'_, f64>,
    y: &[u8],
    config: &ForestConfig,
    resamples: &[Vec<usize>],
) -> Result<ForestModel> {
    fit_impl(x, y, config, Some(resamples), true)
}

/// Probability of class 1: mean over trees of the leaf class-1 fraction.
pub fn predict_proba(model: &ForestModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.n_features {
        return Err(CoreError::DimensionMismatch {
            expected: format!("{} features", model.n_features),
            actual: format!("{}", x.len()),
        });
    }
    let sum: f64 = model.trees.iter().map(|t| t.predict_dist(x)[1]).sum();
    Ok(sum / model.trees.len() as f64)
}

/// Out-of-bag accuracy: each sample is voted on only by trees for which it
/// was out-of-bag. Errors if no sample has any OOB tree.
pub fn oob_score(model: &ForestModel, x: ArrayView2<'_, f64>, y: &[u8]) -> Result<f64> {
    let n = y.len();
    let mut prob_sum = vec![0.0f64; n];
    let mut votes = vec![0u32; n];
    for (tree, oob) in model.trees.iter().zip(&model.oob_indices) {
        for &i in oob {
            let i = i as usize;
            let row: Vec<f64> = x.row(i).to_vec();
            prob_sum[i] += tree.predict_dist(&row)[1];
            votes[i] += 1;
        }
    }
    let mut correct = 0usize;
    let mut counted = 0usize;
    for i in 0..n {
        if votes[i] == 0 {
            continue;
        }
        counted += 1;
        let pred = if prob_sum[i] / votes[i] as f64 >= 0.5 { 1u8 } else { 0u8 };
        if pred == y[i] {
            correct += 1;
        }
    }
    if counted == 0 {
        return Err(CoreError::Model("no sample has any out-of-bag tree".into()));
    }
    Ok(correct as f64 / counted as f64)
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

const FOREST_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ForestFile {
    version: u32,
    model: ForestModel,
}

pub fn save_forest(model: &ForestModel, path: impl AsRef<Path>) -> Result<()> {
    let file = ForestFile { version: FOREST_VERSION, model: model.clone() };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_forest(path: impl AsRef<Path>) -> Result<ForestModel> {
    let text = std::fs::read_to_string(path)?;
    let file: ForestFile = serde_json::from_str(&text)?;
    if file.version != FOREST_VERSION {
        return Err(CoreError::Model(format!("unsupported forest file version {}", file.version)));
    }
    Ok(file.model)
}
