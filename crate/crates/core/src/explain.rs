//! Exact Shapley attributions for tree ensembles in log-odds space.
//!
//! Uses the polynomial-time path algorithm: each root-to-leaf path keeps the
//! proportion of "zero" (feature absent, cover-weighted) and "one" (feature
//! present, follows `x`) paths for every feature seen so far, and leaf values
//! are distributed through the Shapley weights of that path.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::model::{Tree, TreeEnsemble, TreeNode};

#[derive(Debug, Clone, Copy)]
struct PathElem {
    feature: Option<usize>,
    zero: f64,
    one: f64,
    weight: f64,
}

fn extend(path: &mut Vec<PathElem>, zero: f64, one: f64, feature: Option<usize>) {
    let l = path.len();
    path.push(PathElem {
        feature,
        zero,
        one,
        weight: if l == 0 { 1.0 } else { 0.0 },
    });
    let lf = (l + 1) as f64;
    for i in (0..l).rev() {
        path[i + 1].weight += one * path[i].weight * (i + 1) as f64 / lf;
        path[i].weight = zero * path[i].weight * (l - i) as f64 / lf;
    }
}

fn unwind(path: &mut Vec<PathElem>, i: usize) {
    let l = path.len() - 1;
    let lf = (l + 1) as f64;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut next = path[l].weight;
    for j in (0..l).rev() {
        if one != 0.0 {
            let tmp = path[j].weight;
            path[j].weight = next * lf / ((j + 1) as f64 * one);
            next = tmp - path[j].weight * zero * (l - j) as f64 / lf;
        } else {
            path[j].weight = path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    for j in i..l {
        path[j].feature = path[j + 1].feature;
        path[j].zero = path[j + 1].zero;
        path[j].one = path[j + 1].one;
    }
    path.pop();
}

/// Sum of path weights as if element `i` were unwound, without mutating.
fn unwound_sum(path: &[PathElem], i: usize) -> f64 {
    let l = path.len() - 1;
    let lf = (l + 1) as f64;
    let (one, zero) = (path[i].one, path[i].zero);
    let mut next = path[l].weight;
    let mut total = 0.0;
    for j in (0..l).rev() {
        if one != 0.0 {
            let w = next * lf / ((j + 1) as f64 * one);
            total += w;
            next = path[j].weight - w * zero * (l - j) as f64 / lf;
        } else {
            total += path[j].weight * lf / (zero * (l - j) as f64);
        }
    }
    total
}

fn child_fraction(tree: &Tree, parent: usize, child: usize) -> f64 {
    let p = tree.nodes[parent].cover();
    if p > 0.0 {
        tree.nodes[child].cover() / p
    } else {
        0.5
    }
}

#[allow(clippy::too_many_arguments)]
fn recurse(
    tree: &Tree,
    x: &[Option<f64>],
    phi: &mut [f64],
    node: usize,
    mut path: Vec<PathElem>,
    zero: f64,
    one: f64,
    feature: Option<usize>,
) {
    extend(&mut path, zero, one, feature);
    match tree.nodes[node] {
        TreeNode::Leaf { leaf, .. } => {
            for i in 1..path.len() {
                let w = unwound_sum(&path, i);
                let e = path[i];
                if let Some(f) = e.feature {
                    phi[f] += w * (e.one - e.zero) * leaf;
                }
            }
        }
        TreeNode::Split {
            feature: split,
            threshold,
            default,
            left,
            right,
            ..
        } => {
            let hot = Tree::next(x[split], threshold, default, left, right);
            let cold = if hot == left { right } else { left };
            let (mut iz, mut io) = (1.0, 1.0);
            if let Some(k) = path.iter().skip(1).position(|e| e.feature == Some(split)) {
                let k = k + 1;
                iz = path[k].zero;
                io = path[k].one;
                unwind(&mut path, k);
            }
            let hot_frac = child_fraction(tree, node, hot);
            let cold_frac = child_fraction(tree, node, cold);
            recurse(tree, x, phi, hot, path.clone(), iz * hot_frac, io, Some(split));
            recurse(tree, x, phi, cold, path, iz * cold_frac, 0.0, Some(split));
        }
    }
}

/// Cover-weighted mean output of a tree.
pub fn expected_value(tree: &Tree) -> f64 {
    fn go(tree: &Tree, node: usize) -> f64 {
        match tree.nodes[node] {
            TreeNode::Leaf { leaf, .. } => leaf,
            TreeNode::Split { left, right, .. } => {
                child_fraction(tree, node, left) * go(tree, left)
                    + child_fraction(tree, node, right) * go(tree, right)
            }
        }
    }
    go(tree, 0)
}

/// Attributions of one tree's raw output (no learning-rate scaling).
pub fn tree_shap(tree: &Tree, x: &[Option<f64>]) -> Vec<f64> {
    let mut phi = vec![0.0; x.len()];
    recurse(tree, x, &mut phi, 0, Vec::with_capacity(16), 1.0, 1.0, None);
    phi
}

/// Expected margin: the value attributions are measured against.
pub fn base_value(ensemble: &TreeEnsemble) -> f64 {
    ensemble.base_score
        + ensemble.learning_rate * ensemble.trees.iter().map(expected_value).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Attribution {
    pub user_id: String,
    pub base_value: f64,
    pub phi: Vec<f64>,
    pub margin: f64,
}

/// Shapley values of the ensemble margin; `base_value + sum(phi) == margin`.
pub fn shap_values(ensemble: &TreeEnsemble, x: &[Option<f64>]) -> Result<(f64, Vec<f64>)> {
    ensemble.predict_margin(x)?;
    let mut phi = vec![0.0; x.len()];
    for tree in &ensemble.trees {
        for (acc, v) in phi.iter_mut().zip(tree_shap(tree, x)) {
            *acc += ensemble.learning_rate * v;
        }
    }
    Ok((base_value(ensemble), phi))
}

pub fn explain_matrix(ensemble: &TreeEnsemble, matrix: &FeatureMatrix) -> Result<Vec<Attribution>> {
    ensemble.check_schema(matrix)?;
    matrix
        .rows
        .par_iter()
        .map(|row| {
            let (base, phi) = shap_values(ensemble, &row.values)?;
            Ok(Attribution {
                user_id: row.user_id.clone(),
                base_value: base,
                phi,
                margin: ensemble.predict_margin(&row.values)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureImportance {
    pub feature: String,
    pub mean_abs_shap: f64,
    /// Pearson correlation between feature value and its attribution over
    /// rows where the value is present; 0 when either side is constant.
    pub value_shap_correlation: f64,
}

fn pearson(pairs: &[(f64, f64)]) -> f64 {
    let n = pairs.len() as f64;
    if pairs.len() < 2 {
        return 0.0;
    }
    let mx = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pairs.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for &(x, y) in pairs {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Per-feature summary, ranked by mean |phi| (schema order breaks ties).
pub fn shap_summary(matrix: &FeatureMatrix, attributions: &[Attribution]) -> Result<Vec<FeatureImportance>> {
    if attributions.len() != matrix.len() {
        return Err(Error::Contract(format!(
            "{} attributions for {} rows",
            attributions.len(),
            matrix.len()
        )));
    }
    let n = attributions.len().max(1) as f64;
    let mut out: Vec<FeatureImportance> = matrix
        .schema
        .iter()
        .enumerate()
        .map(|(f, name)| {
            let mean_abs = attributions.iter().map(|a| a.phi[f].abs()).sum::<f64>() / n;
            let pairs: Vec<(f64, f64)> = matrix
                .rows
                .iter()
                .zip(attributions)
                .filter_map(|(r, a)| r.values[f].map(|v| (v, a.phi[f])))
                .collect();
            FeatureImportance {
                feature: name.clone(),
                mean_abs_shap: mean_abs,
                value_shap_correlation: pearson(&pairs),
            }
        })
        .collect();
    out.sort_by(|a, b| b.mean_abs_shap.total_cmp(&a.mean_abs_shap));
    Ok(out)
}

pub fn attributions_csv(schema: &[String], attributions: &[Attribution]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["user_id".to_string(), "base_value".to_string()];
    header.extend(schema.iter().cloned());
    header.push("margin".into());
    w.write_record(&header).expect("in-memory write");
    for a in attributions {
        let mut rec = vec![a.user_id.clone(), a.base_value.to_string()];
        rec.extend(a.phi.iter().map(f64::to_string));
        rec.push(a.margin.to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

pub fn summary_csv(summary: &[FeatureImportance]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "feature", "mean_abs_shap", "value_shap_correlation"])
        .expect("in-memory write");
    for (i, s) in summary.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            s.feature.clone(),
            s.mean_abs_shap.to_string(),
            s.value_shap_correlation.to_string(),
        ])
        .expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}
