//! Per-user feature vectors for the three experiments.
//!
//! * `B`: static sentiment of whole conversations plus interaction count.
//! * `B_LW`: `B` plus the message-wise dynamics of the longest conversation.
//! * `B_LW_NP`: `B_LW` with passive users removed.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{longest_conversation, Corpus, NpsClass, UserRecord};
use crate::dynamics::{
    continuous_curve, descriptive_stats, ewma, last_third, linear_trend, second_derivative_mean,
    star_counts, DEFAULT_ALPHA,
};
use crate::error::{Error, Result};
use crate::sentiment::{
    message_wise_series, static_conversation_sentiment, ScorerBackend, DEFAULT_MAX_CHARS,
};

pub const BASELINE_FEATURES: [&str; 5] = [
    "static_mean",
    "static_min",
    "static_max",
    "static_median",
    "n_interactions",
];

pub const LINEWISE_FEATURES: [&str; 19] = [
    "lw_slope",
    "lw_concavity_mean",
    "lw_mean",
    "lw_min",
    "lw_max",
    "lw_median",
    "lw_std",
    "lw_cv",
    "lw_last_sentiment",
    "lw_n_messages",
    "lw_star_count_0",
    "lw_star_count_1",
    "lw_star_count_2",
    "lw_star_count_3",
    "lw_star_count_4",
    "lw_lastthird_mean",
    "lw_lastthird_min",
    "lw_lastthird_max",
    "avg_static_sentiment_all_convs",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ExperimentKind {
    #[serde(rename = "B")]
    Baseline,
    #[serde(rename = "B_LW")]
    BaselineLinewise,
    #[serde(rename = "B_LW_NP")]
    BaselineLinewiseNoPassive,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 3] = [
        ExperimentKind::Baseline,
        ExperimentKind::BaselineLinewise,
        ExperimentKind::BaselineLinewiseNoPassive,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::Baseline => "B",
            ExperimentKind::BaselineLinewise => "B_LW",
            ExperimentKind::BaselineLinewiseNoPassive => "B_LW_NP",
        }
    }

    pub fn uses_linewise(self) -> bool {
        self != ExperimentKind::Baseline
    }

    pub fn excludes_passives(self) -> bool {
        self == ExperimentKind::BaselineLinewiseNoPassive
    }

    pub fn schema(self) -> Vec<String> {
        let mut names: Vec<String> = BASELINE_FEATURES.iter().map(|s| s.to_string()).collect();
        if self.uses_linewise() {
            names.extend(LINEWISE_FEATURES.iter().map(|s| s.to_string()));
        }
        names
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ExperimentKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown experiment {s:?} (B, B_LW, B_LW_NP)")))
    }
}

/// Named feature values for one user; `None` marks an undefined value.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub user_id: String,
    pub label: Option<u8>,
    pub entries: Vec<(&'static str, Option<f64>)>,
}

impl FeatureVector {
    pub fn get(&self, name: &str) -> Option<Option<f64>> {
        self.entries.iter().find(|(n, _)| *n == name).map(|(_, v)| *v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub user_id: String,
    /// 1 for promoters, 0 otherwise.
    pub label: u8,
    pub values: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub schema: Vec<String>,
    pub rows: Vec<FeatureRow>,
    pub experiment: ExperimentKind,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.schema.len()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// (negatives, positives)
    pub fn class_counts(&self) -> (usize, usize) {
        let pos = self.rows.iter().filter(|r| r.label == 1).count();
        (self.rows.len() - pos, pos)
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.schema.iter().position(|s| s == name)
    }

    pub fn select(&self, keep: impl Fn(&FeatureRow) -> bool) -> FeatureMatrix {
        FeatureMatrix {
            schema: self.schema.clone(),
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            experiment: self.experiment,
        }
    }

    /// User-wise stratified split; same seed and user set give the same
    /// partition as [`crate::corpus::split`].
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(FeatureMatrix, FeatureMatrix)> {
        let items: Vec<(String, bool)> = self
            .rows
            .iter()
            .map(|r| (r.user_id.clone(), r.label == 1))
            .collect();
        let test: HashSet<String> = crate::corpus::stratified_test_ids(&items, test_fraction, seed)?;
        Ok((
            self.select(|r| !test.contains(&r.user_id)),
            self.select(|r| test.contains(&r.user_id)),
        ))
    }
}

/// Knobs shared by all extractors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureConfig {
    pub alpha: f64,
    pub max_chars: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            alpha: DEFAULT_ALPHA,
            max_chars: DEFAULT_MAX_CHARS,
        }
    }
}

fn binary_label(user: &UserRecord) -> Option<u8> {
    user.label.map(|l| u8::from(l.klass.is_promoter()))
}

fn static_scores(user: &UserRecord, backend: &ScorerBackend, cfg: &FeatureConfig) -> Result<Vec<f64>> {
    if user.conversations.is_empty() {
        return Err(Error::Contract(format!("user {} has no conversations", user.user_id)));
    }
    user.conversations
        .iter()
        .map(|c| static_conversation_sentiment(backend, c, cfg.max_chars).map(|s| s.continuous))
        .collect()
}

fn baseline_entries(statics: &[f64]) -> Result<Vec<(&'static str, Option<f64>)>> {
    let s = descriptive_stats(statics)?;
    Ok(BASELINE_FEATURES
        .into_iter()
        .zip([s.mean, s.min, s.max, s.median, statics.len() as f64])
        .map(|(n, v)| (n, Some(v)))
        .collect())
}

fn linewise_entries(
    user: &UserRecord,
    backend: &ScorerBackend,
    cfg: &FeatureConfig,
    statics: &[f64],
) -> Result<Vec<(&'static str, Option<f64>)>> {
    let conv = longest_conversation(user)?;
    let series = continuous_curve(&message_wise_series(backend, conv)?)?;
    let smooth = ewma(&series.values, cfg.alpha)?;
    let trend = linear_trend(&smooth);
    let concavity = second_derivative_mean(&smooth);
    let stats = descriptive_stats(&series.values)?;
    let tail = descriptive_stats(last_third(&series.values))?;
    let counts = star_counts(&series.stars);
    let avg_static = statics.iter().sum::<f64>() / statics.len() as f64;

    let values = [
        trend.defined.then_some(trend.slope),
        concavity.defined.then_some(concavity.mean),
        Some(stats.mean),
        Some(stats.min),
        Some(stats.max),
        Some(stats.median),
        Some(stats.std),
        Some(stats.cv),
        series.values.last().copied(),
        Some(series.len() as f64),
        Some(counts[0] as f64),
        Some(counts[1] as f64),
        Some(counts[2] as f64),
        Some(counts[3] as f64),
        Some(counts[4] as f64),
        Some(tail.mean),
        Some(tail.min),
        Some(tail.max),
        Some(avg_static),
    ];
    Ok(LINEWISE_FEATURES.into_iter().zip(values).collect())
}

/// Static-sentiment summary over all of the user's conversations.
pub fn baseline_features(
    user: &UserRecord,
    backend: &ScorerBackend,
    cfg: &FeatureConfig,
) -> Result<FeatureVector> {
    let statics = static_scores(user, backend, cfg)?;
    Ok(FeatureVector {
        user_id: user.user_id.clone(),
        label: binary_label(user),
        entries: baseline_entries(&statics)?,
    })
}

/// Dynamics of the longest conversation. Trend and concavity use the
/// smoothed curve; the remaining statistics use the continuous curve.
pub fn linewise_features(
    user: &UserRecord,
    backend: &ScorerBackend,
    cfg: &FeatureConfig,
) -> Result<FeatureVector> {
    let statics = static_scores(user, backend, cfg)?;
    Ok(FeatureVector {
        user_id: user.user_id.clone(),
        label: binary_label(user),
        entries: linewise_entries(user, backend, cfg, &statics)?,
    })
}

fn user_features(
    user: &UserRecord,
    experiment: ExperimentKind,
    backend: &ScorerBackend,
    cfg: &FeatureConfig,
) -> Result<FeatureRow> {
    let label = binary_label(user)
        .ok_or_else(|| Error::Validation(format!("user {} has no NPS label", user.user_id)))?;
    let statics = static_scores(user, backend, cfg)?;
    let mut entries = baseline_entries(&statics)?;
    if experiment.uses_linewise() {
        entries.extend(linewise_entries(user, backend, cfg, &statics)?);
    }
    Ok(FeatureRow {
        user_id: user.user_id.clone(),
        label,
        values: entries.into_iter().map(|(_, v)| v).collect(),
    })
}

/// Builds the feature matrix for `experiment`, rows sorted by user id.
pub fn assemble_matrix(
    corpus: &Corpus,
    experiment: ExperimentKind,
    backend: &ScorerBackend,
    cfg: &FeatureConfig,
) -> Result<FeatureMatrix> {
    let mut users: Vec<&UserRecord> = corpus.users.iter().collect();
    for u in &users {
        u.class()?;
    }
    if experiment.excludes_passives() {
        users.retain(|u| u.label.map(|l| l.klass) != Some(NpsClass::Passive));
    }
    users.sort_by(|a, b| a.user_id.cmp(&b.user_id));
    let rows = users
        .par_iter()
        .map(|u| user_features(u, experiment, backend, cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeatureMatrix {
        schema: experiment.schema(),
        rows,
        experiment,
    })
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// Header is the schema followed by `user_id,label`; missing values are
/// empty cells.
pub fn matrix_to_csv(matrix: &FeatureMatrix) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = matrix.schema.clone();
    header.push("user_id".into());
    header.push("label".into());
    w.write_record(&header).expect("in-memory write");
    for row in &matrix.rows {
        let mut rec: Vec<String> = row
            .values
            .iter()
            .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
            .collect();
        rec.push(row.user_id.clone());
        rec.push(row.label.to_string());
        w.write_record(&rec).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 csv")
}

pub fn matrix_from_csv(text: &str, experiment: ExperimentKind) -> Result<FeatureMatrix> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(String::from).collect();
    let n = header.len();
    if n < 2 || header[n - 2] != "user_id" || header[n - 1] != "label" {
        return Err(Error::Schema("feature CSV must end with user_id,label columns".into()));
    }
    let schema = header[..n - 2].to_vec();
    if schema != experiment.schema() {
        return Err(Error::Schema(format!(
            "feature CSV columns do not match experiment {experiment}"
        )));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let line = i + 2;
        let bad = |message: String| Error::Parse { line, message };
        let values = rec
            .iter()
            .take(n - 2)
            .map(|cell| {
                if cell.is_empty() {
                    Ok(None)
                } else {
                    cell.parse::<f64>()
                        .map(Some)
                        .map_err(|e| bad(format!("{cell:?}: {e}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let label = match &rec[n - 1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label {other:?} is not 0/1"))),
        };
        rows.push(FeatureRow {
            user_id: rec[n - 2].to_string(),
            label,
            values,
        });
    }
    Ok(FeatureMatrix {
        schema,
        rows,
        experiment,
    })
}
