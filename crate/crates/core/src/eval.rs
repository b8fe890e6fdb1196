//! Binary-classifier validation metrics and the score histogram.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ExperimentKind, FeatureMatrix};
use crate::model::TreeEnsemble;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const SCORECARD_BINS: usize = 10;

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "both classes must be present".into(),
        ));
    }
    Ok((pos, neg))
}

fn sorted_by_score(scores: &[f64], labels: &[u8]) -> Vec<(f64, u8)> {
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs
}

/// Groups of tied scores in ascending order as `(negatives, positives)`.
fn tie_groups(pairs: &[(f64, u8)]) -> Vec<(u64, u64)> {
    let mut groups = Vec::new();
    let mut i = 0;
    while i < pairs.len() {
        let mut j = i;
        let (mut neg, mut pos) = (0u64, 0u64);
        while j < pairs.len() && pairs[j].0 == pairs[i].0 {
            if pairs[j].1 == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        groups.push((neg, pos));
        i = j;
    }
    groups
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half.
///
/// Computed as an exact integer count of half-wins, so the result equals
/// pairwise enumeration bit for bit.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let mut half_wins: u128 = 0;
    let mut neg_below: u64 = 0;
    for (n, p) in tie_groups(&sorted_by_score(scores, labels)) {
        half_wins += 2 * u128::from(p) * u128::from(neg_below) + u128::from(p) * u128::from(n);
        neg_below += n;
    }
    Ok(half_wins as f64 / (2 * pos as u128 * neg as u128) as f64)
}

/// Largest gap between the per-class empirical CDFs of the scores.
pub fn ks(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    let (mut cum_pos, mut cum_neg) = (0u64, 0u64);
    let mut best: f64 = 0.0;
    for (n, p) in tie_groups(&sorted_by_score(scores, labels)) {
        cum_pos += p;
        cum_neg += n;
        let gap = (cum_pos as f64 / pos as f64 - cum_neg as f64 / neg as f64).abs();
        best = best.max(gap);
    }
    Ok(best)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub r#fn: usize,
}

impl Confusion {
    pub fn at_threshold(scores: &[f64], labels: &[u8], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l == 1) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.r#fn += 1,
            }
        }
        c
    }
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        0.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

/// Macro F1 over both classes and specificity (non-promoters as the
/// negative class) for predictions `score >= threshold`.
pub fn macro_f1_and_specificity(scores: &[f64], labels: &[u8], threshold: f64) -> Result<(f64, f64)> {
    check_inputs(scores, labels)?;
    let c = Confusion::at_threshold(scores, labels, threshold);
    let f1_pos = f1(c.tp, c.fp, c.r#fn);
    let f1_neg = f1(c.tn, c.r#fn, c.fp);
    let specificity = c.tn as f64 / (c.tn + c.fp) as f64;
    Ok(((f1_pos + f1_neg) / 2.0, specificity))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorecardBin {
    pub lo: f64,
    pub hi: f64,
    pub promoter_count: usize,
    pub non_promoter_count: usize,
}

impl ScorecardBin {
    pub fn total(&self) -> usize {
        self.promoter_count + self.non_promoter_count
    }
}

fn bin_edge(k: usize) -> f64 {
    k as f64 / SCORECARD_BINS as f64
}

fn bin_of(score: f64) -> usize {
    let s = score.clamp(0.0, 1.0);
    let mut k = ((s * SCORECARD_BINS as f64).floor() as usize).min(SCORECARD_BINS - 1);
    while k > 0 && s < bin_edge(k) {
        k -= 1;
    }
    while k + 1 < SCORECARD_BINS && s >= bin_edge(k + 1) {
        k += 1;
    }
    k
}

/// Ten 0.1-wide bins `[lo, hi)`, the last one closed at 1.
pub fn scorecard(scores: &[f64], labels: &[u8]) -> Vec<ScorecardBin> {
    let mut bins: Vec<ScorecardBin> = (0..SCORECARD_BINS)
        .map(|k| ScorecardBin {
            lo: bin_edge(k),
            hi: bin_edge(k + 1),
            promoter_count: 0,
            non_promoter_count: 0,
        })
        .collect();
    for (&s, &l) in scores.iter().zip(labels) {
        let b = &mut bins[bin_of(s)];
        if l == 1 {
            b.promoter_count += 1;
        } else {
            b.non_promoter_count += 1;
        }
    }
    bins
}

pub fn scorecard_csv(bins: &[ScorecardBin]) -> String {
    let mut out = String::from("lo,hi,promoter_count,non_promoter_count\n");
    for b in bins {
        out.push_str(&format!(
            "{},{},{},{}\n",
            b.lo, b.hi, b.promoter_count, b.non_promoter_count
        ));
    }
    out
}

/// Share of non-promoters per populated bin, checked for a non-increasing
/// trend as the score grows.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Monotonicity {
    pub min_count: usize,
    /// `(bin lower edge, non-promoter fraction, bin size)` for bins with at
    /// least `min_count` samples.
    pub fractions: Vec<(f64, f64, usize)>,
    pub monotone: bool,
}

pub fn scorecard_monotonicity(bins: &[ScorecardBin], min_count: usize) -> Monotonicity {
    let fractions: Vec<(f64, f64, usize)> = bins
        .iter()
        .filter(|b| b.total() >= min_count && b.total() > 0)
        .map(|b| (b.lo, b.non_promoter_count as f64 / b.total() as f64, b.total()))
        .collect();
    let monotone = fractions.windows(2).all(|w| w[1].1 <= w[0].1);
    Monotonicity {
        min_count,
        fractions,
        monotone,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub experiment: ExperimentKind,
    pub auc: f64,
    pub ks: f64,
    pub macro_f1: f64,
    pub specificity: f64,
    pub threshold: f64,
    pub n_test: usize,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn evaluate_scores(
    experiment: ExperimentKind,
    scores: &[f64],
    labels: &[u8],
    threshold: f64,
) -> Result<(EvaluationReport, Vec<ScorecardBin>)> {
    let (macro_f1, specificity) = macro_f1_and_specificity(scores, labels, threshold)?;
    let report = EvaluationReport {
        experiment,
        auc: auc(scores, labels)?,
        ks: ks(scores, labels)?,
        macro_f1,
        specificity,
        threshold,
        n_test: scores.len(),
    };
    Ok((report, scorecard(scores, labels)))
}

/// Scores `test` with the ensemble and computes every metric plus the
/// scorecard at the default threshold.
pub fn evaluate(
    ensemble: &TreeEnsemble,
    test: &FeatureMatrix,
) -> Result<(EvaluationReport, Vec<ScorecardBin>)> {
    let scores = ensemble.predict_matrix(test)?;
    evaluate_scores(test.experiment, &scores, &test.labels(), DEFAULT_THRESHOLD)
}
