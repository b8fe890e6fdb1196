//! Numeric transforms over message-wise sentiment series.

use crate::error::{Error, Result};
use crate::sentiment::{SentimentScore, N_STARS};

/// Smoothing factor for the exponentially weighted mean of the curve.
pub const DEFAULT_ALPHA: f64 = 2.0 / 3.0;

/// Continuous sentiment values with the parallel discrete stars.
#[derive(Debug, Clone, PartialEq)]
pub struct SentimentSeries {
    pub values: Vec<f64>,
    pub stars: Vec<u8>,
}

impl SentimentSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// `star + P(star)` for every message.
pub fn continuous_curve(scores: &[SentimentScore]) -> Result<SentimentSeries> {
    if scores.is_empty() {
        return Err(Error::Contract("sentiment curve needs at least one message".into()));
    }
    Ok(SentimentSeries {
        values: scores
            .iter()
            .map(|s| f64::from(s.star) + s.prob)
            .collect(),
        stars: scores.iter().map(|s| s.star).collect(),
    })
}

/// Exponentially weighted mean seeded with the first observation:
/// `m[0] = v[0]`, `m[j] = alpha v[j] + (1 - alpha) m[j-1]`.
pub fn ewma(values: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Validation(format!("EWMA alpha {alpha} outside (0, 1]")));
    }
    if values.is_empty() {
        return Err(Error::Contract("EWMA of an empty series".into()));
    }
    let mut out = Vec::with_capacity(values.len());
    let mut acc = values[0];
    out.push(acc);
    for &v in &values[1..] {
        acc = alpha * v + (1.0 - alpha) * acc;
        out.push(acc);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrendFit {
    /// Sentiment units per message.
    pub slope: f64,
    pub intercept: f64,
    /// False when fewer than two points were available.
    pub defined: bool,
}

impl TrendFit {
    pub fn at(&self, x: f64) -> f64 {
        self.intercept + self.slope * x
    }
}

/// Ordinary least squares of `values` against indices `0..N`.
pub fn linear_trend(values: &[f64]) -> TrendFit {
    let n = values.len();
    if n < 2 {
        return TrendFit {
            slope: 0.0,
            intercept: values.first().copied().unwrap_or(0.0),
            defined: false,
        };
    }
    let x_mean = (n - 1) as f64 / 2.0;
    let y_mean = values.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, &y) in values.iter().enumerate() {
        let dx = i as f64 - x_mean;
        sxy += dx * (y - y_mean);
        sxx += dx * dx;
    }
    let slope = sxy / sxx;
    TrendFit {
        slope,
        intercept: y_mean - slope * x_mean,
        defined: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Concavity {
    pub mean: f64,
    /// False for series shorter than three points.
    pub defined: bool,
}

/// Mean of the central second difference `v[j+1] - 2 v[j] + v[j-1]`.
pub fn second_derivative_mean(values: &[f64]) -> Concavity {
    if values.len() < 3 {
        return Concavity {
            mean: 0.0,
            defined: false,
        };
    }
    let sum: f64 = values
        .windows(3)
        .map(|w| w[2] - 2.0 * w[1] + w[0])
        .sum();
    Concavity {
        mean: sum / (values.len() - 2) as f64,
        defined: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    /// Population standard deviation.
    pub std: f64,
    /// `std / mean`, zero when the mean is zero.
    pub cv: f64,
}

pub fn descriptive_stats(values: &[f64]) -> Result<SeriesStats> {
    if values.is_empty() {
        return Err(Error::Contract("statistics of an empty series".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len().is_multiple_of(2) {
        (sorted[mid - 1] + sorted[mid]) / 2.0
    } else {
        sorted[mid]
    };
    Ok(SeriesStats {
        mean,
        min: sorted[0],
        max: sorted[sorted.len() - 1],
        median,
        std,
        cv: if mean == 0.0 { 0.0 } else { std / mean },
    })
}

/// The trailing `ceil(N / 3)` values.
pub fn last_third(values: &[f64]) -> &[f64] {
    let k = values.len().div_ceil(3);
    &values[values.len() - k..]
}

pub fn star_counts(stars: &[u8]) -> [usize; N_STARS] {
    let mut counts = [0; N_STARS];
    for &s in stars {
        counts[usize::from(s)] += 1;
    }
    counts
}

/// One row of the exported curve: the discrete line, the continuous curve,
/// its smoothed version and the linear fit over the smoothed version.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CurveRow {
    pub message_index: usize,
    pub star: u8,
    pub continuous: f64,
    pub ewma: f64,
    pub trend_fit: f64,
}

pub fn curve_rows(series: &SentimentSeries, alpha: f64) -> Result<Vec<CurveRow>> {
    let smooth = ewma(&series.values, alpha)?;
    let fit = linear_trend(&smooth);
    Ok(series
        .values
        .iter()
        .zip(&series.stars)
        .zip(&smooth)
        .enumerate()
        .map(|(i, ((&continuous, &star), &ewma))| CurveRow {
            message_index: i,
            star,
            continuous,
            ewma,
            trend_fit: fit.at(i as f64),
        })
        .collect())
}

pub fn curve_csv(rows: &[CurveRow]) -> String {
    let mut out = String::from("message_index,star,continuous,ewma,trend_fit\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.message_index, r.star, r.continuous, r.ewma, r.trend_fit
        ));
    }
    out
}
