//! Five-star sentiment scoring behind interchangeable backends.
//!
//! A backend returns a [`StarDistribution`] per text; [`to_sentiment_score`]
//! turns it into the discrete star (argmax) plus the continuous value
//! `star + P(star)` used by the sentiment curve.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{Conversation, Corpus};
use crate::error::{Error, Result};

pub const N_STARS: usize = 5;
const SUM_TOLERANCE: f64 = 1e-6;
/// Default character budget for whole-conversation scoring.
pub const DEFAULT_MAX_CHARS: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; N_STARS]", into = "[f64; N_STARS]")]
pub struct StarDistribution([f64; N_STARS]);

impl StarDistribution {
    pub fn new(probs: [f64; N_STARS]) -> Result<Self> {
        if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
            return Err(Error::Validation(format!(
                "star probability {p} outside [0, 1]"
            )));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::Validation(format!(
                "star probabilities sum to {sum}, not 1"
            )));
        }
        Ok(StarDistribution(probs))
    }

    pub fn from_slice(probs: &[f64]) -> Result<Self> {
        let arr: [f64; N_STARS] = probs.try_into().map_err(|_| {
            Error::Validation(format!("expected {N_STARS} probabilities, got {}", probs.len()))
        })?;
        Self::new(arr)
    }

    pub fn probs(&self) -> &[f64; N_STARS] {
        &self.0
    }

    /// Most probable star, lowest index on ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for s in 1..N_STARS {
            if self.0[s] > self.0[best] {
                best = s;
            }
        }
        best
    }
}

impl TryFrom<[f64; N_STARS]> for StarDistribution {
    type Error = Error;

    fn try_from(value: [f64; N_STARS]) -> Result<Self> {
        Self::new(value)
    }
}

impl From<StarDistribution> for [f64; N_STARS] {
    fn from(d: StarDistribution) -> Self {
        d.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SentimentScore {
    pub star: u8,
    pub prob: f64,
    pub continuous: f64,
}

pub fn to_sentiment_score(dist: &StarDistribution) -> SentimentScore {
    let star = dist.argmax();
    let prob = dist.probs()[star];
    SentimentScore {
        star: star as u8,
        prob,
        continuous: star as f64 + prob,
    }
}

// ---------------------------------------------------------------------------
// Lexicon reference scorer
// ---------------------------------------------------------------------------

pub const POSITIVE_WORDS: &[&str] = &[
    "good", "great", "excellent", "thanks", "thank", "perfect", "happy", "love", "awesome",
    "helpful", "solved", "resolved", "fast", "amazing", "wonderful", "nice", "glad", "appreciate",
    "gracias", "excelente", "genial", "perfecto", "bueno", "buena", "feliz", "encanta",
    "resuelto", "rapido", "amable", "increible", "bien",
];

pub const NEGATIVE_WORDS: &[&str] = &[
    "bad", "terrible", "awful", "angry", "worst", "problem", "never", "slow", "broken", "useless",
    "hate", "horrible", "annoyed", "frustrated", "unacceptable", "wrong", "disappointed",
    "malo", "mala", "pesimo", "problema", "nunca", "lento", "inutil", "enojado",
    "frustrado", "molesto", "error", "fraude", "peor",
];

fn tokens(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
}

/// Deterministic word-list scorer.
///
/// valence `v = (pos - neg) / max(1, pos + neg)`, star `round(2 (v + 1))`,
/// `0.6 + 0.3 |v|` on that star and the remainder split evenly.
pub fn lexicon_score(text: &str) -> StarDistribution {
    let (mut pos, mut neg) = (0usize, 0usize);
    for tok in tokens(text) {
        if POSITIVE_WORDS.contains(&tok.as_str()) {
            pos += 1;
        } else if NEGATIVE_WORDS.contains(&tok.as_str()) {
            neg += 1;
        }
    }
    let v = (pos as f64 - neg as f64) / (pos + neg).max(1) as f64;
    let star = ((v + 1.0) * 2.0).round() as usize;
    let top = 0.6 + 0.3 * v.abs();
    let rest = (1.0 - top) / (N_STARS - 1) as f64;
    let mut probs = [rest; N_STARS];
    probs[star] = top;
    StarDistribution(probs)
}

// ---------------------------------------------------------------------------
// Precomputed scores
// ---------------------------------------------------------------------------

/// One line of the precomputed-score JSONL file. A record without
/// `message_index` holds the whole-conversation score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub conversation_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message_index: Option<usize>,
    pub probs: StarDistribution,
}

#[derive(Debug, Clone, Default)]
pub struct PrecomputedScores {
    table: HashMap<(String, Option<usize>), StarDistribution>,
}

impl PrecomputedScores {
    pub fn from_records(records: impl IntoIterator<Item = ScoreRecord>) -> Self {
        PrecomputedScores {
            table: records
                .into_iter()
                .map(|r| ((r.conversation_id, r.message_index), r.probs))
                .collect(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: ScoreRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            records.push(rec);
        }
        Ok(Self::from_records(records))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&crate::io::read_to_string(path)?)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn get(&self, conversation_id: &str, message_index: Option<usize>) -> Result<StarDistribution> {
        self.table
            .get(&(conversation_id.to_string(), message_index))
            .copied()
            .ok_or_else(|| Error::MissingScore {
                conversation_id: conversation_id.to_string(),
                index: message_index,
            })
    }
}

pub fn serialize_score_records(records: &[ScoreRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("score record serializes"));
        out.push('\n');
    }
    out
}

// ---------------------------------------------------------------------------
// Remote scorer
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct ScoreRequestBody<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct ScoreResult {
    probs: Vec<f64>,
}

#[derive(Deserialize)]
struct ScoreResponseBody {
    results: Vec<ScoreResult>,
}

#[derive(Deserialize)]
struct HealthBody {
    status: String,
}

/// Client for the HTTP scoring service (`POST /score`, `GET /health`).
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    endpoint: String,
    agent: ureq::Agent,
}

impl RemoteScorer {
    pub fn new(endpoint: &str, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        RemoteScorer {
            endpoint: endpoint.trim_end_matches('/').to_string(),
            agent,
        }
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn health(&self) -> Result<()> {
        let url = format!("{}/health", self.endpoint);
        let body: HealthBody = self
            .agent
            .get(&url)
            .call()
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Transport(format!("GET {url}: {e}")))?;
        if body.status == "ok" {
            Ok(())
        } else {
            Err(Error::Transport(format!("scorer reports status {:?}", body.status)))
        }
    }

    pub fn score_texts(&self, texts: &[&str]) -> Result<Vec<StarDistribution>> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let url = format!("{}/score", self.endpoint);
        let body: ScoreResponseBody = self
            .agent
            .post(&url)
            .send_json(ScoreRequestBody { texts })
            .and_then(|mut r| r.body_mut().read_json())
            .map_err(|e| Error::Transport(format!("POST {url}: {e}")))?;
        if body.results.len() != texts.len() {
            return Err(Error::Transport(format!(
                "scorer returned {} results for {} texts",
                body.results.len(),
                texts.len()
            )));
        }
        body.results
            .iter()
            .map(|r| {
                StarDistribution::from_slice(&r.probs)
                    .map_err(|e| Error::Transport(format!("scorer returned invalid distribution: {e}")))
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Backend dispatch
// ---------------------------------------------------------------------------

/// A unit of scoring work. `message_index` is `None` for a whole
/// conversation.
#[derive(Debug, Clone)]
pub struct ScoreRequest<'a> {
    pub conversation_id: &'a str,
    pub message_index: Option<usize>,
    pub text: &'a str,
}

#[derive(Debug, Clone)]
pub enum ScorerBackend {
    Lexicon,
    Precomputed(PrecomputedScores),
    Remote(RemoteScorer),
}

impl ScorerBackend {
    pub fn kind(&self) -> &'static str {
        match self {
            ScorerBackend::Lexicon => "lexicon",
            ScorerBackend::Precomputed(_) => "precomputed",
            ScorerBackend::Remote(_) => "remote",
        }
    }

    /// Scores a batch in order. The remote backend sends one request per
    /// batch.
    pub fn score_batch(&self, requests: &[ScoreRequest<'_>]) -> Result<Vec<StarDistribution>> {
        match self {
            ScorerBackend::Lexicon => Ok(requests.iter().map(|r| lexicon_score(r.text)).collect()),
            ScorerBackend::Precomputed(table) => requests
                .iter()
                .map(|r| table.get(r.conversation_id, r.message_index))
                .collect(),
            ScorerBackend::Remote(remote) => {
                let texts: Vec<&str> = requests.iter().map(|r| r.text).collect();
                remote.score_texts(&texts)
            }
        }
    }

    pub fn score_message(&self, request: &ScoreRequest<'_>) -> Result<StarDistribution> {
        Ok(self.score_batch(std::slice::from_ref(request))?[0])
    }
}

fn require_customer_messages(conv: &Conversation) -> Result<()> {
    if conv.customer_message_count() == 0 {
        return Err(Error::Contract(format!(
            "conversation {} has no customer messages",
            conv.conversation_id
        )));
    }
    Ok(())
}

/// Customer messages joined by `\n`, truncated to `max_chars` characters.
pub fn conversation_text(conv: &Conversation, max_chars: usize) -> String {
    let joined = conv
        .customer_messages()
        .map(|m| m.text.as_str())
        .collect::<Vec<_>>()
        .join("\n");
    match joined.char_indices().nth(max_chars) {
        Some((cut, _)) => joined[..cut].to_string(),
        None => joined,
    }
}

pub fn static_conversation_sentiment(
    backend: &ScorerBackend,
    conv: &Conversation,
    max_chars: usize,
) -> Result<SentimentScore> {
    require_customer_messages(conv)?;
    let text = conversation_text(conv, max_chars);
    let dist = backend.score_message(&ScoreRequest {
        conversation_id: &conv.conversation_id,
        message_index: None,
        text: &text,
    })?;
    Ok(to_sentiment_score(&dist))
}

pub fn message_wise_distributions(
    backend: &ScorerBackend,
    conv: &Conversation,
) -> Result<Vec<StarDistribution>> {
    require_customer_messages(conv)?;
    let requests: Vec<ScoreRequest<'_>> = conv
        .customer_messages()
        .map(|m| ScoreRequest {
            conversation_id: &conv.conversation_id,
            message_index: Some(m.index),
            text: &m.text,
        })
        .collect();
    backend.score_batch(&requests)
}

/// One score per customer message, in conversation order.
pub fn message_wise_series(
    backend: &ScorerBackend,
    conv: &Conversation,
) -> Result<Vec<SentimentScore>> {
    Ok(message_wise_distributions(backend, conv)?
        .iter()
        .map(to_sentiment_score)
        .collect())
}

/// Scores every customer message and every conversation of a corpus into
/// precomputed-score records.
pub fn score_corpus(
    backend: &ScorerBackend,
    corpus: &Corpus,
    max_chars: usize,
) -> Result<Vec<ScoreRecord>> {
    let mut records = Vec::new();
    for conv in corpus.users.iter().flat_map(|u| &u.conversations) {
        let dists = message_wise_distributions(backend, conv)?;
        for (m, probs) in conv.customer_messages().zip(dists) {
            records.push(ScoreRecord {
                conversation_id: conv.conversation_id.clone(),
                message_index: Some(m.index),
                probs,
            });
        }
        let text = conversation_text(conv, max_chars);
        let whole = backend.score_message(&ScoreRequest {
            conversation_id: &conv.conversation_id,
            message_index: None,
            text: &text,
        })?;
        records.push(ScoreRecord {
            conversation_id: conv.conversation_id.clone(),
            message_index: None,
            probs: whole,
        });
    }
    Ok(records)
}
