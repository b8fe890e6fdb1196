//! Conversation corpus: data model, JSONL ingestion, preprocessing,
//! user-wise stratified splitting and NPS labeling.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sender {
    Customer,
    Agent,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    /// 0-based position within the conversation.
    pub index: usize,
    pub sender: Sender,
    pub text: String,
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conversation {
    pub conversation_id: String,
    pub user_id: String,
    pub messages: Vec<Message>,
}

impl Conversation {
    pub fn customer_messages(&self) -> impl Iterator<Item = &Message> {
        self.messages
            .iter()
            .filter(|m| m.sender == Sender::Customer)
    }

    pub fn customer_message_count(&self) -> usize {
        self.customer_messages().count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NpsClass {
    Promoter,
    Passive,
    Detractor,
}

impl NpsClass {
    pub fn is_promoter(self) -> bool {
        self == NpsClass::Promoter
    }

    pub fn as_str(self) -> &'static str {
        match self {
            NpsClass::Promoter => "promoter",
            NpsClass::Passive => "passive",
            NpsClass::Detractor => "detractor",
        }
    }
}

impl fmt::Display for NpsClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NpsClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "promoter" => Ok(NpsClass::Promoter),
            "passive" => Ok(NpsClass::Passive),
            "detractor" => Ok(NpsClass::Detractor),
            other => Err(Error::Validation(format!("unknown NPS class {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NpsLabel {
    pub raw_score: Option<u8>,
    pub klass: NpsClass,
}

impl NpsLabel {
    pub fn from_class(klass: NpsClass) -> Self {
        NpsLabel {
            raw_score: None,
            klass,
        }
    }
}

/// Maps a 0–10 survey answer to its NPS segment: 9–10 promoter,
/// 7–8 passive, 0–6 detractor.
pub fn label_from_nps(raw: i64) -> Result<NpsLabel> {
    let klass = match raw {
        9..=10 => NpsClass::Promoter,
        7..=8 => NpsClass::Passive,
        0..=6 => NpsClass::Detractor,
        _ => {
            return Err(Error::Validation(format!(
                "NPS score {raw} outside 0..=10"
            )))
        }
    };
    Ok(NpsLabel {
        raw_score: Some(raw as u8),
        klass,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    pub user_id: String,
    pub conversations: Vec<Conversation>,
    pub label: Option<NpsLabel>,
}

impl UserRecord {
    pub fn class(&self) -> Result<NpsClass> {
        self.label
            .map(|l| l.klass)
            .ok_or_else(|| Error::Validation(format!("user {} has no NPS label", self.user_id)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub users: Vec<UserRecord>,
    pub provenance: String,
}

impl Corpus {
    pub fn conversation_count(&self) -> usize {
        self.users.iter().map(|u| u.conversations.len()).sum()
    }

    pub fn find_conversation(&self, conversation_id: &str) -> Option<&Conversation> {
        self.users
            .iter()
            .flat_map(|u| &u.conversations)
            .find(|c| c.conversation_id == conversation_id)
    }

    pub fn class_counts(&self) -> BTreeMap<NpsClass, usize> {
        let mut counts = BTreeMap::new();
        for u in &self.users {
            if let Some(l) = u.label {
                *counts.entry(l.klass).or_insert(0) += 1;
            }
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// JSONL wire format
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct WireMessage {
    sender: Sender,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    timestamp: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WireConversation {
    conversation_id: String,
    user_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nps_raw: Option<i64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    nps_class: Option<String>,
    messages: Vec<WireMessage>,
}

fn wire_label(rec: &WireConversation, line: usize) -> Result<NpsLabel> {
    let parse_err = |message: String| Error::Parse { line, message };
    match (rec.nps_raw, rec.nps_class.as_deref()) {
        (Some(raw), None) => label_from_nps(raw).map_err(|e| parse_err(e.to_string())),
        (None, Some(k)) => k
            .parse()
            .map(NpsLabel::from_class)
            .map_err(|e: Error| parse_err(e.to_string())),
        (Some(_), Some(_)) => Err(parse_err(
            "exactly one of nps_raw / nps_class is allowed".into(),
        )),
        (None, None) => Err(parse_err(
            "one of nps_raw / nps_class is required".into(),
        )),
    }
}

/// Parses conversation JSONL text. Line numbers in errors are 1-based;
/// blank lines are skipped.
pub fn parse_corpus(text: &str) -> Result<Corpus> {
    let mut users: Vec<UserRecord> = Vec::new();
    let mut user_pos: HashMap<String, usize> = HashMap::new();
    let mut seen_conversations: HashSet<String> = HashSet::new();

    for (i, raw_line) in text.lines().enumerate() {
        let line = i + 1;
        if raw_line.trim().is_empty() {
            continue;
        }
        let rec: WireConversation = serde_json::from_str(raw_line).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        let label = wire_label(&rec, line)?;
        if !seen_conversations.insert(rec.conversation_id.clone()) {
            return Err(Error::Validation(format!(
                "line {line}: duplicate conversation_id {:?}",
                rec.conversation_id
            )));
        }
        let conversation = Conversation {
            conversation_id: rec.conversation_id,
            user_id: rec.user_id.clone(),
            messages: rec
                .messages
                .into_iter()
                .enumerate()
                .map(|(index, m)| Message {
                    index,
                    sender: m.sender,
                    text: m.text,
                    timestamp: m.timestamp,
                })
                .collect(),
        };
        match user_pos.get(&rec.user_id) {
            Some(&p) => {
                let user = &mut users[p];
                if user.label != Some(label) {
                    return Err(Error::Validation(format!(
                        "line {line}: NPS label for user {:?} disagrees with an earlier record",
                        rec.user_id
                    )));
                }
                user.conversations.push(conversation);
            }
            None => {
                user_pos.insert(rec.user_id.clone(), users.len());
                users.push(UserRecord {
                    user_id: rec.user_id,
                    conversations: vec![conversation],
                    label: Some(label),
                });
            }
        }
    }
    Ok(Corpus {
        users,
        provenance: String::new(),
    })
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = crate::io::read_to_string(path)?;
    let mut corpus = parse_corpus(&text)?;
    corpus.provenance = format!("loaded from {}", path.display());
    Ok(corpus)
}

/// Serializes to the canonical JSONL form: one record per conversation,
/// users in corpus order, `nps_raw` preferred over `nps_class`.
pub fn serialize_corpus(corpus: &Corpus) -> String {
    let mut out = String::new();
    for user in &corpus.users {
        let (nps_raw, nps_class) = match user.label {
            Some(NpsLabel {
                raw_score: Some(r), ..
            }) => (Some(i64::from(r)), None),
            Some(NpsLabel { klass, .. }) => (None, Some(klass.as_str().to_string())),
            None => (None, None),
        };
        for c in &user.conversations {
            let rec = WireConversation {
                conversation_id: c.conversation_id.clone(),
                user_id: user.user_id.clone(),
                nps_raw,
                nps_class: nps_class.clone(),
                messages: c
                    .messages
                    .iter()
                    .map(|m| WireMessage {
                        sender: m.sender,
                        text: m.text.clone(),
                        timestamp: m.timestamp.clone(),
                    })
                    .collect(),
            };
            out.push_str(&serde_json::to_string(&rec).expect("conversation serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    crate::io::write_atomic_str(path, &serialize_corpus(corpus))
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

const KEPT_PUNCTUATION: &[char] = &['.', ',', ';', ':', '!', '?', '\'', '"', '(', ')', '-'];

/// Strips everything except letters, digits, whitespace and basic
/// punctuation, then trims.
pub fn clean_text(text: &str) -> String {
    let kept: String = text
        .chars()
        .filter(|&c| c.is_alphanumeric() || c.is_whitespace() || KEPT_PUNCTUATION.contains(&c))
        .collect();
    kept.trim().to_string()
}

/// Removes special characters and blank messages, drops conversations
/// without customer messages and users without conversations, and
/// re-indexes messages.
pub fn preprocess(corpus: Corpus) -> Corpus {
    let users = corpus
        .users
        .into_iter()
        .filter_map(|mut user| {
            user.conversations = user
                .conversations
                .into_iter()
                .filter_map(|mut conv| {
                    conv.messages = conv
                        .messages
                        .into_iter()
                        .filter_map(|mut m| {
                            m.text = clean_text(&m.text);
                            (!m.text.is_empty()).then_some(m)
                        })
                        .enumerate()
                        .map(|(index, m)| Message { index, ..m })
                        .collect();
                    (conv.customer_message_count() > 0).then_some(conv)
                })
                .collect();
            (!user.conversations.is_empty()).then_some(user)
        })
        .collect();
    Corpus {
        users,
        provenance: corpus.provenance,
    }
}

/// The conversation with the most customer messages; ties go to the
/// lexicographically smallest `conversation_id`.
pub fn longest_conversation(user: &UserRecord) -> Result<&Conversation> {
    user.conversations
        .iter()
        .min_by(|a, b| {
            b.customer_message_count()
                .cmp(&a.customer_message_count())
                .then_with(|| a.conversation_id.cmp(&b.conversation_id))
        })
        .ok_or_else(|| Error::Contract(format!("user {} has no conversations", user.user_id)))
}

// ---------------------------------------------------------------------------
// Splitting
// ---------------------------------------------------------------------------

/// Stratified test-set selection over `(id, positive)` items.
///
/// Each class contributes `floor(fraction * n_class)` items; the remaining
/// slots up to `round(fraction * n)` go to a seeded draw over the classes
/// with a fractional remainder, at most one extra per class. Returns the ids
/// chosen for the test side. Result depends only on the id set, not on the
/// input order.
pub fn stratified_test_ids(
    items: &[(String, bool)],
    fraction: f64,
    seed: u64,
) -> Result<HashSet<String>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Validation(format!(
            "test fraction {fraction} must lie strictly between 0 and 1"
        )));
    }
    let mut classes: [Vec<&str>; 2] = [Vec::new(), Vec::new()];
    for (id, positive) in items {
        classes[usize::from(*positive)].push(id.as_str());
    }
    for (k, members) in classes.iter_mut().enumerate() {
        if members.is_empty() {
            let name = if k == 1 { "promoter" } else { "non-promoter" };
            return Err(Error::Stratification(format!("no {name} users to stratify")));
        }
        members.sort_unstable();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exact: Vec<f64> = classes.iter().map(|c| fraction * c.len() as f64).collect();
    let mut take: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let target = (fraction * items.len() as f64).round() as usize;
    let mut eligible: Vec<usize> = (0..2).filter(|&k| exact[k].fract() > 0.0).collect();
    eligible.shuffle(&mut rng);
    let missing = target.saturating_sub(take.iter().sum());
    for &k in eligible.iter().take(missing) {
        take[k] += 1;
    }

    let mut test = HashSet::new();
    for (members, n) in classes.iter_mut().zip(take) {
        members.shuffle(&mut rng);
        test.extend(members.iter().take(n).map(|s| s.to_string()));
    }
    Ok(test)
}

/// User-wise train/test split stratified by promoter vs non-promoter.
pub fn split(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<(Corpus, Corpus)> {
    let items = corpus
        .users
        .iter()
        .map(|u| Ok((u.user_id.clone(), u.class()?.is_promoter())))
        .collect::<Result<Vec<_>>>()?;
    let test_ids = stratified_test_ids(&items, test_fraction, seed)?;
    let (test, train): (Vec<_>, Vec<_>) = corpus
        .users
        .iter()
        .cloned()
        .partition(|u| test_ids.contains(&u.user_id));
    Ok((
        Corpus {
            users: train,
            provenance: format!("{} [train split, seed {seed}]", corpus.provenance),
        },
        Corpus {
            users: test,
            provenance: format!("{} [test split, seed {seed}]", corpus.provenance),
        },
    ))
}
