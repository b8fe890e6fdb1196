//! Brute-force reference implementations. None of these call into the
//! library code they check.
#![allow(dead_code)]

use convodyn::features::{ExperimentKind, FeatureMatrix, FeatureRow};
use convodyn::model::{Direction, Tree, TreeNode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Fraction of positive/negative pairs ranked correctly, ties as half.
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut num = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
    }
    num / pairs
}

/// Largest gap between class-wise empirical CDFs, scanned over every
/// observed score.
pub fn brute_ks(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut best: f64 = 0.0;
    for &t in scores {
        let cp = scores.iter().zip(labels).filter(|(s, l)| **l == 1 && **s <= t).count() as f64 / n_pos;
        let cn = scores.iter().zip(labels).filter(|(s, l)| **l == 0 && **s <= t).count() as f64 / n_neg;
        best = best.max((cp - cn).abs());
    }
    best
}

fn sse(values: &[f64], slope: f64) -> f64 {
    // intercept profiled out: the best intercept for a fixed slope is the
    // mean residual
    let n = values.len() as f64;
    let resid: Vec<f64> = values.iter().enumerate().map(|(i, y)| y - slope * i as f64).collect();
    let c = resid.iter().sum::<f64>() / n;
    resid.iter().map(|r| (r - c).powi(2)).sum()
}

/// Slope minimizing squared error, by successively refined grid search.
pub fn grid_slope(values: &[f64]) -> f64 {
    let (mut lo, mut hi) = (-20.0, 20.0);
    for _ in 0..40 {
        let steps = 40;
        let step = (hi - lo) / steps as f64;
        let mut best = lo;
        let mut best_err = f64::INFINITY;
        for k in 0..=steps {
            let b = lo + step * k as f64;
            let e = sse(values, b);
            if e < best_err {
                best_err = e;
                best = b;
            }
        }
        lo = best - step;
        hi = best + step;
    }
    (lo + hi) / 2.0
}

/// Best depth-1 split found by routing every row explicitly for every
/// candidate. Returns (gain, left-row mask).
pub fn exhaustive_root_gain(
    x: &[Vec<Option<f64>>],
    grad: &[f64],
    hess: &[f64],
    min_child_weight: f64,
    lambda: f64,
    gamma: f64,
) -> Option<(f64, Vec<bool>)> {
    let n_features = x.first().map_or(0, |r| r.len());
    let score = |g: f64, h: f64| g * g / (h + lambda);
    let g_all: f64 = grad.iter().sum();
    let h_all: f64 = hess.iter().sum();
    let mut best: Option<(f64, Vec<bool>)> = None;
    for f in 0..n_features {
        let mut vals: Vec<f64> = x.iter().filter_map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        // every way to cut the present values, with missing rows on either
        // side; "cut after the last value" isolates the missing rows
        for cut in 1..=vals.len() {
            for missing_left in [false, true] {
                let left: Vec<bool> = x
                    .iter()
                    .map(|r| match r[f] {
                        Some(v) => vals[..cut].contains(&v),
                        None => missing_left,
                    })
                    .collect();
                let (mut gl, mut hl) = (0.0, 0.0);
                for i in 0..x.len() {
                    if left[i] {
                        gl += grad[i];
                        hl += hess[i];
                    }
                }
                let (gr, hr) = (g_all - gl, h_all - hl);
                let n_left = left.iter().filter(|&&l| l).count();
                if n_left == 0 || n_left == x.len() {
                    continue;
                }
                if hl < min_child_weight || hr < min_child_weight {
                    continue;
                }
                let gain = 0.5 * (score(gl, hl) + score(gr, hr) - score(g_all, h_all)) - gamma;
                if gain > 0.0 && best.as_ref().is_none_or(|(b, _)| gain > *b) {
                    best = Some((gain, left));
                }
            }
        }
    }
    best
}

fn route(tree: &Tree, node: usize, x: &[Option<f64>]) -> usize {
    match tree.nodes[node] {
        TreeNode::Split {
            feature,
            threshold,
            default,
            left,
            right,
            ..
        } => match x[feature] {
            Some(v) if v < threshold => left,
            Some(_) => right,
            None if default == Direction::Left => left,
            None => right,
        },
        TreeNode::Leaf { .. } => unreachable!(),
    }
}

/// Expected tree output when only features in `known` are observed; the
/// rest are integrated out with cover weights.
pub fn conditional_expectation(tree: &Tree, node: usize, x: &[Option<f64>], known: &[bool]) -> f64 {
    match tree.nodes[node] {
        TreeNode::Leaf { leaf, .. } => leaf,
        TreeNode::Split {
            feature, left, right, cover, ..
        } => {
            if known[feature] {
                conditional_expectation(tree, route(tree, node, x), x, known)
            } else {
                let wl = tree.nodes[left].cover() / cover;
                let wr = tree.nodes[right].cover() / cover;
                wl * conditional_expectation(tree, left, x, known)
                    + wr * conditional_expectation(tree, right, x, known)
            }
        }
    }
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Shapley values by enumerating all 2^m coalitions.
pub fn brute_shapley(trees: &[Tree], learning_rate: f64, x: &[Option<f64>]) -> Vec<f64> {
    let m = x.len();
    let value = |mask: usize| -> f64 {
        let known: Vec<bool> = (0..m).map(|i| mask & (1 << i) != 0).collect();
        learning_rate
            * trees
                .iter()
                .map(|t| conditional_expectation(t, 0, x, &known))
                .sum::<f64>()
    };
    let mut phi = vec![0.0; m];
    for (i, p) in phi.iter_mut().enumerate() {
        for mask in 0..(1usize << m) {
            if mask & (1 << i) != 0 {
                continue;
            }
            let s = mask.count_ones() as usize;
            let w = factorial(s) * factorial(m - s - 1) / factorial(m);
            *p += w * (value(mask | (1 << i)) - value(mask));
        }
    }
    phi
}

/// Random tree of at most `depth` levels over `n_features` with consistent
/// covers (each parent's cover is the sum of its children's).
pub fn random_tree(rng: &mut ChaCha8Rng, n_features: usize, depth: usize) -> Tree {
    fn build(rng: &mut ChaCha8Rng, nodes: &mut Vec<TreeNode>, n_features: usize, depth: usize) -> usize {
        let id = nodes.len();
        if depth == 0 || rng.random_bool(0.2) {
            nodes.push(TreeNode::Leaf {
                leaf: rng.random_range(-2.0..2.0),
                cover: rng.random_range(0.5..5.0),
            });
            return id;
        }
        nodes.push(TreeNode::Leaf { leaf: 0.0, cover: 0.0 });
        let feature = rng.random_range(0..n_features);
        let threshold = rng.random_range(-1.0..1.0);
        let default = if rng.random_bool(0.5) { Direction::Left } else { Direction::Right };
        let left = build(rng, nodes, n_features, depth - 1);
        let right = build(rng, nodes, n_features, depth - 1);
        let cover = nodes[left].cover() + nodes[right].cover();
        nodes[id] = TreeNode::Split {
            feature,
            threshold,
            default,
            left,
            right,
            cover,
        };
        id
    }
    let mut nodes = Vec::new();
    build(rng, &mut nodes, n_features, depth);
    Tree { nodes }
}

pub fn random_input(rng: &mut ChaCha8Rng, n_features: usize, missing_rate: f64) -> Vec<Option<f64>> {
    (0..n_features)
        .map(|_| (!rng.random_bool(missing_rate)).then(|| rng.random_range(-1.5..1.5)))
        .collect()
}

/// Labeled matrix where the label depends on the first two features plus
/// noise; values come from a small grid so ties are common.
pub fn random_matrix(seed: u64, n_rows: usize, n_features: usize, missing_rate: f64) -> FeatureMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<FeatureRow> = (0..n_rows)
        .map(|i| {
            let values: Vec<Option<f64>> = (0..n_features)
                .map(|_| (!rng.random_bool(missing_rate)).then(|| f64::from(rng.random_range(0..8u8)) / 2.0))
                .collect();
            let signal = values.first().copied().flatten().unwrap_or(2.0)
                - values.get(1).copied().flatten().unwrap_or(1.0) * 0.5;
            let label = u8::from(signal + rng.random_range(-1.5..1.5) > 1.0);
            FeatureRow {
                user_id: format!("r{i:04}"),
                label,
                values,
            }
        })
        .collect();
    let mut m = FeatureMatrix {
        schema: (0..n_features).map(|i| format!("x{i}")).collect(),
        rows,
        experiment: ExperimentKind::Baseline,
    };
    // guarantee both classes
    let (neg, pos) = m.class_counts();
    if pos == 0 {
        m.rows[0].label = 1;
    }
    if neg == 0 {
        m.rows[0].label = 0;
    }
    m
}
