//! Gradient-boosted regression trees on the logistic loss.
//!
//! Trees are grown greedily with exact split enumeration over sorted feature
//! values. Each split also learns a default direction for missing values by
//! trying both sides and keeping the better gain. Leaf weights and gains use
//! the second-order statistics of the loss with L2 regularization:
//!
//! ```text
//! w    = -G / (H + lambda)
//! gain = 1/2 [G_L^2/(H_L+lambda) + G_R^2/(H_R+lambda) - G^2/(H+lambda)] - gamma
//! ```

use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::auc;
use crate::features::{FeatureMatrix, FeatureVector};

pub const FORMAT_VERSION: u32 = 1;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mixes a base seed with stream coordinates (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: &[u64]) -> u64 {
    let mut z = seed;
    for &s in stream {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(s);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

// ---------------------------------------------------------------------------
// Trees
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Right,
}

/// `cover` is the hessian mass of training rows that reached the node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TreeNode {
    Split {
        feature: usize,
        /// Present values below the threshold go left.
        threshold: f64,
        default: Direction,
        left: usize,
        right: usize,
        cover: f64,
    },
    Leaf {
        leaf: f64,
        cover: f64,
    },
}

impl TreeNode {
    pub fn cover(&self) -> f64 {
        match self {
            TreeNode::Split { cover, .. } | TreeNode::Leaf { cover, .. } => *cover,
        }
    }
}

/// Nodes in a flat arena; the root is node 0 and children always come after
/// their parent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn leaf(value: f64, cover: f64) -> Self {
        Tree {
            nodes: vec![TreeNode::Leaf { leaf: value, cover }],
        }
    }

    /// Child taken by `value` at a split node.
    pub fn next(feature_value: Option<f64>, threshold: f64, default: Direction, left: usize, right: usize) -> usize {
        let dir = match feature_value {
            Some(v) if !v.is_nan() => {
                if v < threshold {
                    Direction::Left
                } else {
                    Direction::Right
                }
            }
            _ => default,
        };
        match dir {
            Direction::Left => left,
            Direction::Right => right,
        }
    }

    pub fn leaf_index(&self, x: &[Option<f64>]) -> usize {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                TreeNode::Leaf { .. } => return i,
                TreeNode::Split {
                    feature,
                    threshold,
                    default,
                    left,
                    right,
                    ..
                } => i = Tree::next(x[feature], threshold, default, left, right),
            }
        }
    }

    pub fn predict(&self, x: &[Option<f64>]) -> f64 {
        match self.nodes[self.leaf_index(x)] {
            TreeNode::Leaf { leaf, .. } => leaf,
            TreeNode::Split { .. } => unreachable!("leaf_index returns a leaf"),
        }
    }

    pub fn max_depth(&self) -> usize {
        fn depth(t: &Tree, i: usize) -> usize {
            match t.nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + depth(t, left).max(depth(t, right)),
            }
        }
        depth(self, 0)
    }

    /// Features used by at least one split.
    pub fn used_features(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter_map(|n| match n {
            TreeNode::Split { feature, .. } => Some(*feature),
            TreeNode::Leaf { .. } => None,
        })
    }

    fn validate(&self, n_features: usize) -> std::result::Result<(), String> {
        if self.nodes.is_empty() {
            return Err("tree without nodes".into());
        }
        for (i, node) in self.nodes.iter().enumerate() {
            match *node {
                TreeNode::Leaf { leaf, cover } => {
                    if !leaf.is_finite() || !cover.is_finite() {
                        return Err(format!("node {i}: non-finite leaf"));
                    }
                }
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    cover,
                    ..
                } => {
                    if feature >= n_features {
                        return Err(format!("node {i}: feature {feature} outside schema"));
                    }
                    if left <= i || right <= i || left >= self.nodes.len() || right >= self.nodes.len() {
                        return Err(format!("node {i}: invalid child index"));
                    }
                    if threshold.is_nan() || !cover.is_finite() {
                        return Err(format!("node {i}: invalid threshold or cover"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Additive model: `P(promoter) = sigmoid(base_score + learning_rate * sum(tree outputs))`.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeEnsemble {
    pub trees: Vec<Tree>,
    pub learning_rate: f64,
    /// Prior log-odds of the positive class.
    pub base_score: f64,
    pub schema: Vec<String>,
}

impl TreeEnsemble {
    fn check_width(&self, x: &[Option<f64>]) -> Result<()> {
        if x.len() != self.schema.len() {
            return Err(Error::Schema(format!(
                "input has {} features, model expects {}",
                x.len(),
                self.schema.len()
            )));
        }
        Ok(())
    }

    fn margin_unchecked(&self, x: &[Option<f64>]) -> f64 {
        let sum: f64 = self.trees.iter().map(|t| t.predict(x)).sum();
        self.base_score + self.learning_rate * sum
    }

    /// Log-odds output.
    pub fn predict_margin(&self, x: &[Option<f64>]) -> Result<f64> {
        self.check_width(x)?;
        Ok(self.margin_unchecked(x))
    }

    pub fn predict_proba(&self, x: &[Option<f64>]) -> Result<f64> {
        self.predict_margin(x).map(sigmoid)
    }

    /// Like [`predict_proba`](Self::predict_proba) but also checks feature
    /// names against the schema.
    pub fn predict_vector(&self, x: &FeatureVector) -> Result<f64> {
        let names_match = x.entries.len() == self.schema.len()
            && x.entries.iter().zip(&self.schema).all(|((n, _), s)| n == s);
        if !names_match {
            return Err(Error::Schema("feature names differ from model schema".into()));
        }
        let row: Vec<Option<f64>> = x.entries.iter().map(|(_, v)| *v).collect();
        self.predict_proba(&row)
    }

    pub fn check_schema(&self, matrix: &FeatureMatrix) -> Result<()> {
        if matrix.schema != self.schema {
            return Err(Error::Schema(format!(
                "matrix columns ({}) differ from model schema ({})",
                matrix.schema.join(","),
                self.schema.join(",")
            )));
        }
        Ok(())
    }

    pub fn predict_matrix(&self, matrix: &FeatureMatrix) -> Result<Vec<f64>> {
        self.check_schema(matrix)?;
        Ok(matrix
            .rows
            .iter()
            .map(|r| sigmoid(self.margin_unchecked(&r.values)))
            .collect())
    }

    /// The first `n` trees of the ensemble.
    pub fn truncated(&self, n: usize) -> TreeEnsemble {
        TreeEnsemble {
            trees: self.trees[..n.min(self.trees.len())].to_vec(),
            ..self.clone()
        }
    }
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    format_version: u32,
    base_score: f64,
    learning_rate: f64,
    schema: Vec<String>,
    trees: Vec<Tree>,
}

pub fn model_to_json(ensemble: &TreeEnsemble) -> String {
    let file = ModelFile {
        format_version: FORMAT_VERSION,
        base_score: ensemble.base_score,
        learning_rate: ensemble.learning_rate,
        schema: ensemble.schema.clone(),
        trees: ensemble.trees.clone(),
    };
    serde_json::to_string(&file).expect("model serializes")
}

pub fn model_from_json(text: &str) -> Result<TreeEnsemble> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| Error::ModelLoad(e.to_string()))?;
    let version = value
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| Error::ModelLoad("missing format_version".into()))?;
    if version != u64::from(FORMAT_VERSION) {
        return Err(Error::ModelVersion {
            found: u32::try_from(version).unwrap_or(u32::MAX),
            expected: FORMAT_VERSION,
        });
    }
    let file: ModelFile =
        serde_json::from_value(value).map_err(|e| Error::ModelLoad(e.to_string()))?;
    if !file.base_score.is_finite() || !file.learning_rate.is_finite() {
        return Err(Error::ModelLoad("non-finite base score or learning rate".into()));
    }
    for (t, tree) in file.trees.iter().enumerate() {
        tree.validate(file.schema.len())
            .map_err(|e| Error::ModelLoad(format!("tree {t}: {e}")))?;
    }
    Ok(TreeEnsemble {
        trees: file.trees,
        learning_rate: file.learning_rate,
        base_score: file.base_score,
        schema: file.schema,
    })
}

pub fn save_model(ensemble: &TreeEnsemble, path: &Path) -> Result<()> {
    crate::io::write_atomic_str(path, &model_to_json(ensemble))
}

pub fn load_model(path: &Path) -> Result<TreeEnsemble> {
    model_from_json(&crate::io::read_to_string(path)?)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    pub min_child_weight: f64,
    pub subsample_ratio: f64,
    pub colsample_ratio: f64,
    pub l2_lambda: f64,
    pub gamma_min_gain: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            n_trees: 100,
            max_depth: 4,
            learning_rate: 0.1,
            min_child_weight: 1.0,
            subsample_ratio: 1.0,
            colsample_ratio: 1.0,
            l2_lambda: 1.0,
            gamma_min_gain: 0.0,
        }
    }
}

impl HyperParams {
    fn validate(&self) -> Result<()> {
        let ratio_ok = |r: f64| r > 0.0 && r <= 1.0;
        let ok = self.learning_rate > 0.0
            && self.min_child_weight >= 0.0
            && ratio_ok(self.subsample_ratio)
            && ratio_ok(self.colsample_ratio)
            && self.l2_lambda >= 0.0
            && self.gamma_min_gain >= 0.0;
        if !ok {
            return Err(Error::Validation(format!("invalid hyper-parameters {self:?}")));
        }
        Ok(())
    }
}

/// Column-major copy of the training data with NaN for missing values.
struct Columns {
    values: Vec<Vec<f64>>,
    /// Per feature: rows with a present value, ascending by value.
    sorted: Vec<Vec<u32>>,
}

impl Columns {
    fn new(matrix: &FeatureMatrix) -> Self {
        let m = matrix.n_features();
        let values: Vec<Vec<f64>> = (0..m)
            .map(|f| {
                matrix
                    .rows
                    .iter()
                    .map(|r| r.values[f].unwrap_or(f64::NAN))
                    .collect()
            })
            .collect();
        let sorted = values
            .iter()
            .map(|col| {
                let mut idx: Vec<u32> = (0..col.len() as u32)
                    .filter(|&i| !col[i as usize].is_nan())
                    .collect();
                idx.sort_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
                idx
            })
            .collect();
        Columns { values, sorted }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitCandidate {
    pub feature: usize,
    pub threshold: f64,
    pub default: Direction,
    pub gain: f64,
}

struct GrowParams {
    max_depth: usize,
    min_child_weight: f64,
    lambda: f64,
    gamma: f64,
}

impl GrowParams {
    fn score(&self, g: f64, h: f64) -> f64 {
        g * g / (h + self.lambda)
    }

    fn weight(&self, g: f64, h: f64) -> f64 {
        let w = -g / (h + self.lambda);
        if w.is_finite() {
            w
        } else {
            0.0
        }
    }

    fn gain(&self, gl: f64, hl: f64, gr: f64, hr: f64) -> Option<f64> {
        if hl < self.min_child_weight || hr < self.min_child_weight {
            return None;
        }
        let g = gl + gr;
        let h = hl + hr;
        Some(0.5 * (self.score(gl, hl) + self.score(gr, hr) - self.score(g, h)) - self.gamma)
    }
}

/// Midpoint between two consecutive distinct values, kept strictly above
/// the lower one.
fn midpoint(lo: f64, hi: f64) -> f64 {
    let mid = lo + (hi - lo) / 2.0;
    if mid > lo {
        mid
    } else {
        hi
    }
}

struct NodeRows {
    /// Per sampled feature, present rows of this node sorted by value.
    sorted: Vec<Vec<u32>>,
    n: usize,
    g: f64,
    h: f64,
}

struct TreeBuilder<'a> {
    columns: &'a Columns,
    features: Vec<usize>,
    grad: &'a [f64],
    hess: &'a [f64],
    params: GrowParams,
    nodes: Vec<TreeNode>,
    goes_left: Vec<bool>,
}

impl TreeBuilder<'_> {
    fn best_split(&self, node: &NodeRows) -> Option<SplitCandidate> {
        let mut best: Option<SplitCandidate> = None;
        let mut consider = |cand: SplitCandidate| {
            if cand.gain > 0.0 && best.is_none_or(|b| cand.gain > b.gain) {
                best = Some(cand);
            }
        };
        for (slot, &feature) in self.features.iter().enumerate() {
            let col = &self.columns.values[feature];
            let present = &node.sorted[slot];
            if present.is_empty() {
                continue;
            }
            let (gp, hp) = present.iter().fold((0.0, 0.0), |(g, h), &r| {
                (g + self.grad[r as usize], h + self.hess[r as usize])
            });
            let has_missing = present.len() < node.n;
            let (gm, hm) = if has_missing { (node.g - gp, node.h - hp) } else { (0.0, 0.0) };

            let (mut gl, mut hl) = (0.0, 0.0);
            for k in 0..present.len() {
                let r = present[k] as usize;
                gl += self.grad[r];
                hl += self.hess[r];
                let v = col[r];
                let next = match present.get(k + 1) {
                    Some(&n) => col[n as usize],
                    None => break,
                };
                if next == v {
                    continue;
                }
                let threshold = midpoint(v, next);
                if let Some(gain) = self.params.gain(gl, hl, gp - gl + gm, hp - hl + hm) {
                    consider(SplitCandidate {
                        feature,
                        threshold,
                        default: Direction::Right,
                        gain,
                    });
                }
                if has_missing {
                    if let Some(gain) = self.params.gain(gl + gm, hl + hm, gp - gl, hp - hl) {
                        consider(SplitCandidate {
                            feature,
                            threshold,
                            default: Direction::Left,
                            gain,
                        });
                    }
                }
            }
            if has_missing {
                // present rows left, missing rows right
                let last = col[*present.last().expect("non-empty") as usize];
                if let Some(gain) = self.params.gain(gp, hp, gm, hm) {
                    consider(SplitCandidate {
                        feature,
                        threshold: last + 1.0,
                        default: Direction::Right,
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, node: NodeRows, depth: usize) -> usize {
        let id = self.nodes.len();
        let leaf = TreeNode::Leaf {
            leaf: self.params.weight(node.g, node.h),
            cover: node.h,
        };
        self.nodes.push(leaf);
        if depth >= self.params.max_depth {
            return id;
        }
        let Some(split) = self.best_split(&node) else {
            return id;
        };

        let col = &self.columns.values[split.feature];
        let default_left = split.default == Direction::Left;
        for list in &node.sorted {
            for &r in list {
                let v = col[r as usize];
                self.goes_left[r as usize] = if v.is_nan() { default_left } else { v < split.threshold };
            }
        }
        let empty = || NodeRows {
            sorted: Vec::with_capacity(node.sorted.len()),
            n: 0,
            g: 0.0,
            h: 0.0,
        };
        let (mut left, mut right) = (empty(), empty());
        for list in &node.sorted {
            let (l, r): (Vec<u32>, Vec<u32>) =
                list.iter().partition(|&&r| self.goes_left[r as usize]);
            left.sorted.push(l);
            right.sorted.push(r);
        }
        // Totals: present rows of the split feature plus its missing rows.
        let slot = self
            .features
            .iter()
            .position(|&f| f == split.feature)
            .expect("split feature is sampled");
        let present = &node.sorted[slot];
        let (mut gp, mut hp) = (0.0, 0.0);
        for &r in present {
            let r = r as usize;
            gp += self.grad[r];
            hp += self.hess[r];
        }
        for &r in &left.sorted[slot] {
            left.g += self.grad[r as usize];
            left.h += self.hess[r as usize];
        }
        left.n = left.sorted[slot].len();
        right.n = present.len() - left.n;
        right.g = gp - left.g;
        right.h = hp - left.h;
        let n_missing = node.n - present.len();
        if n_missing > 0 {
            let (gm, hm) = (node.g - gp, node.h - hp);
            let side = if default_left { &mut left } else { &mut right };
            side.n += n_missing;
            side.g += gm;
            side.h += hm;
        }
        let cover = node.h;
        drop(node);

        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[id] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            default: split.default,
            left: l,
            right: r,
            cover,
        };
        id
    }
}

fn validate_training(matrix: &FeatureMatrix) -> Result<()> {
    let (neg, pos) = matrix.class_counts();
    if matrix.len() < 2 || neg == 0 || pos == 0 {
        return Err(Error::Validation(format!(
            "training needs both classes ({pos} positive, {neg} negative rows)"
        )));
    }
    if let Some(r) = matrix.rows.iter().find(|r| r.values.len() != matrix.schema.len()) {
        return Err(Error::Schema(format!(
            "row {} has {} values for {} columns",
            r.user_id,
            r.values.len(),
            matrix.schema.len()
        )));
    }
    Ok(())
}

/// Grows a single tree on fixed gradients over the given rows and features.
fn build_tree(
    columns: &Columns,
    rows: &[u32],
    features: Vec<usize>,
    grad: &[f64],
    hess: &[f64],
    params: GrowParams,
) -> Tree {
    let n = grad.len();
    let mut in_sample = vec![false; n];
    for &r in rows {
        in_sample[r as usize] = true;
    }
    let sorted = features
        .iter()
        .map(|&f| {
            columns.sorted[f]
                .iter()
                .copied()
                .filter(|&r| in_sample[r as usize])
                .collect()
        })
        .collect();
    let (g, h) = rows.iter().fold((0.0, 0.0), |(g, h), &r| {
        (g + grad[r as usize], h + hess[r as usize])
    });
    let mut builder = TreeBuilder {
        columns,
        features,
        grad,
        hess,
        params,
        nodes: Vec::new(),
        goes_left: vec![false; n],
    };
    builder.grow(NodeRows { sorted, n: rows.len(), g, h }, 0);
    Tree {
        nodes: builder.nodes,
    }
}

/// Best root split of `matrix` for the given gradients, as the learner would
/// choose it. Exposed for oracle comparison.
pub fn best_root_split(
    matrix: &FeatureMatrix,
    grad: &[f64],
    hess: &[f64],
    min_child_weight: f64,
    l2_lambda: f64,
    gamma_min_gain: f64,
) -> Option<SplitCandidate> {
    let columns = Columns::new(matrix);
    let features: Vec<usize> = (0..matrix.n_features()).collect();
    let sorted = features.iter().map(|&f| columns.sorted[f].clone()).collect();
    let builder = TreeBuilder {
        columns: &columns,
        features,
        grad,
        hess,
        params: GrowParams {
            max_depth: 1,
            min_child_weight,
            lambda: l2_lambda,
            gamma: gamma_min_gain,
        },
        nodes: Vec::new(),
        goes_left: vec![false; grad.len()],
    };
    builder.best_split(&NodeRows {
        sorted,
        n: grad.len(),
        g: grad.iter().sum(),
        h: hess.iter().sum(),
    })
}

pub fn fit_gbt(matrix: &FeatureMatrix, params: &HyperParams, seed: u64) -> Result<TreeEnsemble> {
    validate_training(matrix)?;
    params.validate()?;
    let n = matrix.len();
    let m = matrix.n_features();
    let labels: Vec<f64> = matrix.rows.iter().map(|r| f64::from(r.label)).collect();
    let prior = labels.iter().sum::<f64>() / n as f64;
    let base_score = (prior / (1.0 - prior)).ln();
    let columns = Columns::new(matrix);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut margins = vec![base_score; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let n_rows = ((params.subsample_ratio * n as f64).round() as usize).clamp(1, n);
    let n_cols = ((params.colsample_ratio * m as f64).round() as usize).clamp(1, m.max(1));
    let all_rows: Vec<u32> = (0..n as u32).collect();
    let mut trees = Vec::with_capacity(params.n_trees);

    for _ in 0..params.n_trees {
        for i in 0..n {
            let p = sigmoid(margins[i]);
            grad[i] = p - labels[i];
            hess[i] = (p * (1.0 - p)).max(1e-16);
        }
        let rows: Vec<u32> = if n_rows == n {
            all_rows.clone()
        } else {
            let mut r: Vec<u32> = index::sample(&mut rng, n, n_rows)
                .into_iter()
                .map(|i| i as u32)
                .collect();
            r.sort_unstable();
            r
        };
        let features: Vec<usize> = if m == 0 {
            Vec::new()
        } else if n_cols == m {
            (0..m).collect()
        } else {
            let mut f = index::sample(&mut rng, m, n_cols).into_vec();
            f.sort_unstable();
            f
        };
        let tree = build_tree(
            &columns,
            &rows,
            features,
            &grad,
            &hess,
            GrowParams {
                max_depth: params.max_depth,
                min_child_weight: params.min_child_weight,
                lambda: params.l2_lambda,
                gamma: params.gamma_min_gain,
            },
        );
        for (i, row) in matrix.rows.iter().enumerate() {
            margins[i] += params.learning_rate * tree.predict(&row.values);
        }
        trees.push(tree);
    }

    Ok(TreeEnsemble {
        trees,
        learning_rate: params.learning_rate,
        base_score,
        schema: matrix.schema.clone(),
    })
}

/// Mean logistic loss of the ensemble on `matrix`.
pub fn logloss(ensemble: &TreeEnsemble, matrix: &FeatureMatrix) -> Result<f64> {
    let probs = ensemble.predict_matrix(matrix)?;
    let eps = 1e-15;
    let total: f64 = probs
        .iter()
        .zip(&matrix.rows)
        .map(|(&p, r)| {
            let p = p.clamp(eps, 1.0 - eps);
            if r.label == 1 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(total / matrix.len() as f64)
}

// ---------------------------------------------------------------------------
// Undersampling
// ---------------------------------------------------------------------------

/// Downsamples the majority class without replacement to the minority
/// count. Row order is preserved.
pub fn undersample(matrix: &FeatureMatrix, seed: u64) -> Result<FeatureMatrix> {
    let (neg, pos) = matrix.class_counts();
    if neg == 0 || pos == 0 {
        return Err(Error::Sampling(format!(
            "undersampling needs both classes ({pos} positive, {neg} negative rows)"
        )));
    }
    let majority_label = u8::from(pos > neg);
    let keep_count = pos.min(neg);
    let mut majority: Vec<usize> = matrix
        .rows
        .iter()
        .enumerate()
        .filter(|(_, r)| r.label == majority_label)
        .map(|(i, _)| i)
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    majority.shuffle(&mut rng);
    let mut keep = vec![true; matrix.len()];
    for &i in &majority[keep_count..] {
        keep[i] = false;
    }
    Ok(FeatureMatrix {
        schema: matrix.schema.clone(),
        rows: matrix
            .rows
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(r, _)| r.clone())
            .collect(),
        experiment: matrix.experiment,
    })
}

// ---------------------------------------------------------------------------
// Random search
// ---------------------------------------------------------------------------

/// Sampling ranges (inclusive). Rates and the L2 weight are drawn
/// log-uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub max_depth: (usize, usize),
    pub learning_rate: (f64, f64),
    pub n_trees: (usize, usize),
    pub min_child_weight: (usize, usize),
    pub subsample_ratio: (f64, f64),
    pub colsample_ratio: (f64, f64),
    pub l2_lambda: (f64, f64),
    pub gamma_min_gain: (f64, f64),
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            max_depth: (2, 8),
            learning_rate: (0.01, 0.3),
            n_trees: (50, 400),
            min_child_weight: (1, 10),
            subsample_ratio: (0.6, 1.0),
            colsample_ratio: (0.6, 1.0),
            l2_lambda: (0.1, 10.0),
            gamma_min_gain: (0.0, 1.0),
        }
    }
}

impl SearchSpace {
    pub fn point(p: &HyperParams) -> Self {
        SearchSpace {
            max_depth: (p.max_depth, p.max_depth),
            learning_rate: (p.learning_rate, p.learning_rate),
            n_trees: (p.n_trees, p.n_trees),
            min_child_weight: (p.min_child_weight as usize, p.min_child_weight as usize),
            subsample_ratio: (p.subsample_ratio, p.subsample_ratio),
            colsample_ratio: (p.colsample_ratio, p.colsample_ratio),
            l2_lambda: (p.l2_lambda, p.l2_lambda),
            gamma_min_gain: (p.gamma_min_gain, p.gamma_min_gain),
        }
    }

    fn validate(&self) -> Result<()> {
        let ordered_f = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        let positive = |(lo, _): (f64, f64)| lo > 0.0;
        let ok = self.max_depth.0 <= self.max_depth.1
            && self.n_trees.0 <= self.n_trees.1
            && self.min_child_weight.0 <= self.min_child_weight.1
            && ordered_f(self.learning_rate)
            && positive(self.learning_rate)
            && ordered_f(self.l2_lambda)
            && positive(self.l2_lambda)
            && ordered_f(self.subsample_ratio)
            && positive(self.subsample_ratio)
            && self.subsample_ratio.1 <= 1.0
            && ordered_f(self.colsample_ratio)
            && positive(self.colsample_ratio)
            && self.colsample_ratio.1 <= 1.0
            && ordered_f(self.gamma_min_gain)
            && self.gamma_min_gain.0 >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid search space {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> HyperParams {
        let log_uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| -> f64 {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo.ln()..=hi.ln()).exp()
            }
        };
        let uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| -> f64 {
            if lo == hi {
                lo
            } else {
                rng.random_range(lo..=hi)
            }
        };
        HyperParams {
            max_depth: rng.random_range(self.max_depth.0..=self.max_depth.1),
            learning_rate: log_uniform(rng, self.learning_rate),
            n_trees: rng.random_range(self.n_trees.0..=self.n_trees.1),
            min_child_weight: rng.random_range(self.min_child_weight.0..=self.min_child_weight.1) as f64,
            subsample_ratio: uniform(rng, self.subsample_ratio),
            colsample_ratio: uniform(rng, self.colsample_ratio),
            l2_lambda: log_uniform(rng, self.l2_lambda),
            gamma_min_gain: uniform(rng, self.gamma_min_gain),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateResult {
    pub params: HyperParams,
    pub fold_auc: Vec<f64>,
    pub mean_auc: f64,
    pub std_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub seed: u64,
    pub folds: usize,
    pub candidates: Vec<CandidateResult>,
    pub best_index: usize,
}

impl CvReport {
    pub fn best(&self) -> &CandidateResult {
        &self.candidates[self.best_index]
    }
}

/// Fold assignment for each row: every class is shuffled and dealt round
/// robin over the folds.
pub fn stratified_folds(labels: &[u8], folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Validation(format!("need at least 2 folds, got {folds}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if members.len() < folds {
            return Err(Error::Stratification(format!(
                "class {class} has {} rows, fewer than {folds} folds",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        for (k, i) in members.into_iter().enumerate() {
            assignment[i] = k % folds;
        }
    }
    Ok(assignment)
}

/// Random hyper-parameter search scored by mean stratified K-fold AUC.
/// Ties go to the earliest sampled candidate.
pub fn random_search(
    matrix: &FeatureMatrix,
    space: &SearchSpace,
    n_candidates: usize,
    folds: usize,
    seed: u64,
) -> Result<(HyperParams, CvReport)> {
    space.validate()?;
    if n_candidates == 0 {
        return Err(Error::Validation("random search needs at least one candidate".into()));
    }
    let labels = matrix.labels();
    let assignment = stratified_folds(&labels, folds, derive_seed(seed, &[0]))?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[1]));
    let candidates: Vec<HyperParams> = (0..n_candidates).map(|_| space.sample(&mut rng)).collect();

    let jobs: Vec<(usize, usize)> = (0..n_candidates)
        .flat_map(|c| (0..folds).map(move |f| (c, f)))
        .collect();
    let scores = jobs
        .par_iter()
        .map(|&(c, f)| {
            let mut train_keep = Vec::with_capacity(matrix.len());
            let mut valid_rows = Vec::new();
            for (i, row) in matrix.rows.iter().enumerate() {
                let in_valid = assignment[i] == f;
                train_keep.push(!in_valid);
                if in_valid {
                    valid_rows.push(row.clone());
                }
            }
            let train = FeatureMatrix {
                schema: matrix.schema.clone(),
                rows: matrix
                    .rows
                    .iter()
                    .zip(&train_keep)
                    .filter(|(_, &k)| k)
                    .map(|(r, _)| r.clone())
                    .collect(),
                experiment: matrix.experiment,
            };
            let valid = FeatureMatrix {
                schema: matrix.schema.clone(),
                rows: valid_rows,
                experiment: matrix.experiment,
            };
            let model = fit_gbt(&train, &candidates[c], derive_seed(seed, &[2, c as u64, f as u64]))?;
            auc(&model.predict_matrix(&valid)?, &valid.labels())
        })
        .collect::<Result<Vec<f64>>>()?;

    let results: Vec<CandidateResult> = candidates
        .iter()
        .enumerate()
        .map(|(c, params)| {
            let fold_auc = scores[c * folds..(c + 1) * folds].to_vec();
            let mean = fold_auc.iter().sum::<f64>() / folds as f64;
            let var = fold_auc.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / folds as f64;
            CandidateResult {
                params: *params,
                fold_auc,
                mean_auc: mean,
                std_auc: var.sqrt(),
            }
        })
        .collect();
    let mut best_index = 0;
    for (i, r) in results.iter().enumerate() {
        if r.mean_auc > results[best_index].mean_auc {
            best_index = i;
        }
    }
    let report = CvReport {
        seed,
        folds,
        candidates: results,
        best_index,
    };
    Ok((report.best().params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ExperimentKind, FeatureRow};

    fn matrix(rows: &[(&[Option<f64>], u8)]) -> FeatureMatrix {
        let width = rows.first().map_or(1, |r| r.0.len());
        FeatureMatrix {
            schema: (0..width).map(|i| format!("f{i}")).collect(),
            rows: rows
                .iter()
                .enumerate()
                .map(|(i, (v, l))| FeatureRow {
                    user_id: format!("u{i:04}"),
                    label: *l,
                    values: v.to_vec(),
                })
                .collect(),
            experiment: ExperimentKind::Baseline,
        }
    }

    fn balanced(n_pos: usize, n_neg: usize) -> FeatureMatrix {
        let rows: Vec<(Vec<Option<f64>>, u8)> = (0..n_pos + n_neg)
            .map(|i| (vec![Some(i as f64)], u8::from(i < n_pos)))
            .collect();
        let refs: Vec<(&[Option<f64>], u8)> = rows.iter().map(|(v, l)| (v.as_slice(), *l)).collect();
        matrix(&refs)
    }

    #[test]
    fn zero_trees_predict_prior() {
        let m = balanced(3, 1);
        let params = HyperParams {
            n_trees: 0,
            ..HyperParams::default()
        };
        let model = fit_gbt(&m, &params, 0).unwrap();
        for row in &m.rows {
            assert!((model.predict_proba(&row.values).unwrap() - 0.75).abs() < 1e-12);
        }
    }

    #[test]
    fn separable_one_split() {
        let xs = [-2.0, -1.0, -0.5, 0.5, 1.0, 3.0];
        let rows: Vec<(Vec<Option<f64>>, u8)> =
            xs.iter().map(|&x| (vec![Some(x)], u8::from(x > 0.0))).collect();
        let refs: Vec<(&[Option<f64>], u8)> = rows.iter().map(|(v, l)| (v.as_slice(), *l)).collect();
        let m = matrix(&refs);
        let params = HyperParams {
            n_trees: 1,
            max_depth: 1,
            learning_rate: 1.0,
            min_child_weight: 0.0,
            l2_lambda: 0.0,
            ..HyperParams::default()
        };
        let model = fit_gbt(&m, &params, 0).unwrap();
        match model.trees[0].nodes[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(threshold, 0.0),
            ref n => panic!("expected split, got {n:?}"),
        }
        for row in &m.rows {
            let p = model.predict_proba(&row.values).unwrap();
            assert_eq!(u8::from(p >= 0.5), row.label);
        }
    }

    #[test]
    fn predictions_and_defaults() {
        let empty = TreeEnsemble {
            trees: vec![],
            learning_rate: 0.3,
            base_score: 0.0,
            schema: vec!["a".into()],
        };
        assert_eq!(empty.predict_proba(&[Some(1.0)]).unwrap(), 0.5);
        assert!(matches!(empty.predict_proba(&[]), Err(Error::Schema(_))));

        let single = TreeEnsemble {
            trees: vec![Tree::leaf(0.7, 1.0)],
            learning_rate: 1.0,
            ..empty.clone()
        };
        assert_eq!(single.predict_proba(&[None]).unwrap(), sigmoid(0.7));

        let split = TreeEnsemble {
            trees: vec![Tree {
                nodes: vec![
                    TreeNode::Split {
                        feature: 0,
                        threshold: 1.0,
                        default: Direction::Left,
                        left: 1,
                        right: 2,
                        cover: 2.0,
                    },
                    TreeNode::Leaf { leaf: -1.0, cover: 1.0 },
                    TreeNode::Leaf { leaf: 1.0, cover: 1.0 },
                ],
            }],
            learning_rate: 1.0,
            ..empty
        };
        assert_eq!(split.predict_margin(&[None]).unwrap(), -1.0);
        assert_eq!(split.predict_margin(&[Some(f64::NAN)]).unwrap(), -1.0);
        assert_eq!(split.predict_margin(&[Some(1.0)]).unwrap(), 1.0);
        assert_eq!(split.predict_margin(&[Some(0.9)]).unwrap(), -1.0);
    }

    #[test]
    fn missing_values_get_learned_direction() {
        // missing rows are all positives; present rows split at 0
        let rows: Vec<(Vec<Option<f64>>, u8)> = vec![
            (vec![Some(-1.0)], 0),
            (vec![Some(-2.0)], 0),
            (vec![Some(1.0)], 1),
            (vec![Some(2.0)], 1),
            (vec![None], 1),
            (vec![None], 1),
        ];
        let refs: Vec<(&[Option<f64>], u8)> = rows.iter().map(|(v, l)| (v.as_slice(), *l)).collect();
        let m = matrix(&refs);
        let params = HyperParams {
            n_trees: 1,
            max_depth: 1,
            learning_rate: 1.0,
            min_child_weight: 0.0,
            l2_lambda: 0.0,
            ..HyperParams::default()
        };
        let model = fit_gbt(&m, &params, 0).unwrap();
        match model.trees[0].nodes[0] {
            TreeNode::Split { default, .. } => assert_eq!(default, Direction::Right),
            ref n => panic!("expected split, got {n:?}"),
        }
        assert!(model.predict_proba(&[None]).unwrap() > 0.5);
    }

    #[test]
    fn single_class_rejected() {
        let m = balanced(4, 0);
        assert!(matches!(
            fit_gbt(&m, &HyperParams::default(), 0),
            Err(Error::Validation(_))
        ));
        assert!(matches!(undersample(&m, 0), Err(Error::Sampling(_))));
    }

    #[test]
    fn undersample_to_minority() {
        let m = balanced(100, 40);
        let u = undersample(&m, 3).unwrap();
        assert_eq!(u.class_counts(), (40, 40));
        // minority rows untouched, order preserved
        let neg: Vec<_> = u.rows.iter().filter(|r| r.label == 0).collect();
        let orig_neg: Vec<_> = m.rows.iter().filter(|r| r.label == 0).collect();
        assert_eq!(neg, orig_neg);
        assert!(u.rows.windows(2).all(|w| w[0].user_id < w[1].user_id));
        assert_eq!(u, undersample(&m, 3).unwrap());

        let b = balanced(50, 50);
        assert_eq!(undersample(&b, 1).unwrap(), b);
    }

    #[test]
    fn folds_need_enough_rows() {
        let m = balanced(30, 9);
        let err = random_search(&m, &SearchSpace::default(), 2, 10, 0).unwrap_err();
        assert!(matches!(err, Error::Stratification(_)));
        let folds = stratified_folds(&balanced(20, 10).labels(), 10, 5).unwrap();
        for f in 0..10 {
            assert_eq!(folds.iter().filter(|&&x| x == f).count(), 3);
        }
    }

    #[test]
    fn single_point_space_returns_point() {
        let m = balanced(20, 20);
        let point = HyperParams {
            n_trees: 5,
            max_depth: 2,
            learning_rate: 0.2,
            min_child_weight: 1.0,
            subsample_ratio: 0.8,
            colsample_ratio: 1.0,
            l2_lambda: 1.0,
            gamma_min_gain: 0.0,
        };
        let (best, report) = random_search(&m, &SearchSpace::point(&point), 3, 4, 11).unwrap();
        assert_eq!(best, point);
        assert_eq!(report.candidates.len(), 3);
        assert_eq!(report.best_index, 0);
    }

    #[test]
    fn search_is_deterministic() {
        let rows: Vec<(Vec<Option<f64>>, u8)> = (0..80)
            .map(|i| {
                let x = ((i * 37) % 80) as f64;
                (vec![Some(x), Some((i % 7) as f64)], u8::from(x + (i % 5) as f64 > 40.0))
            })
            .collect();
        let refs: Vec<(&[Option<f64>], u8)> = rows.iter().map(|(v, l)| (v.as_slice(), *l)).collect();
        let m = matrix(&refs);
        let space = SearchSpace {
            n_trees: (5, 20),
            ..SearchSpace::default()
        };
        let a = random_search(&m, &space, 3, 5, 42).unwrap();
        let b = random_search(&m, &space, 3, 5, 42).unwrap();
        assert_eq!(a, b);
        let best = a.1.best().mean_auc;
        assert!(a.1.candidates.iter().all(|c| c.mean_auc <= best));
    }

    #[test]
    fn sampled_params_stay_in_space() {
        let space = SearchSpace::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let p = space.sample(&mut rng);
            assert!((2..=8).contains(&p.max_depth));
            assert!((50..=400).contains(&p.n_trees));
            assert!(p.learning_rate >= 0.01 - 1e-12 && p.learning_rate <= 0.3 + 1e-12);
            assert!(p.l2_lambda >= 0.1 - 1e-12 && p.l2_lambda <= 10.0 + 1e-9);
            assert!((1.0..=10.0).contains(&p.min_child_weight));
            assert!((0.6..=1.0).contains(&p.subsample_ratio));
            assert!((0.0..=1.0).contains(&p.gamma_min_gain));
        }
    }

    #[test]
    fn model_json_versioning() {
        let m = balanced(10, 10);
        let model = fit_gbt(&m, &HyperParams { n_trees: 3, ..HyperParams::default() }, 0).unwrap();
        let text = model_to_json(&model);
        assert_eq!(model_from_json(&text).unwrap(), model);

        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v["format_version"] = serde_json::json!(99);
        assert!(matches!(
            model_from_json(&v.to_string()),
            Err(Error::ModelVersion { found: 99, .. })
        ));
        assert!(matches!(
            model_from_json(&text[..text.len() / 2]),
            Err(Error::ModelLoad(_))
        ));
        let node = &v["trees"][0]["nodes"][0];
        assert!(node.get("cover").is_some());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, &[0]), derive_seed(1, &[1]));
        assert_ne!(derive_seed(1, &[2, 0, 1]), derive_seed(1, &[2, 1, 0]));
        assert_eq!(derive_seed(7, &[3]), derive_seed(7, &[3]));
    }
}
