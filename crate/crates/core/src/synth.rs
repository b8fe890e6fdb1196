//! Seeded synthetic corpora with a planted dynamics signal.
//!
//! Every user gets a latent sentiment curve over normalized time `t`:
//!
//! ```text
//! s(t) = a + b (t - 1/2) + c ((t - 1/2)^2 - 1/12)
//! ```
//!
//! Both shape terms integrate to zero, so the curve mean `a` is the same for
//! every class and whole-conversation sentiment carries little signal.
//! Signaled promoters recover (rising, convex), signaled detractors decay
//! (falling, concave) and talk longer. Message stars are the rounded curve
//! plus Gaussian noise, and message texts are built from the lexicon so
//! that the reference scorer recovers each star.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::corpus::{label_from_nps, Conversation, Corpus, Message, NpsClass, Sender, UserRecord};
use crate::error::{Error, Result};
use crate::sentiment::{
    conversation_text, lexicon_score, ScoreRecord, StarDistribution, DEFAULT_MAX_CHARS, N_STARS,
    NEGATIVE_WORDS, POSITIVE_WORDS,
};

/// Promoter / passive / detractor proportions.
pub const CLASS_WEIGHTS: [u32; 3] = [10701, 2470, 3230];

const FILLER_WORDS: &[&str] = &[
    "my", "order", "account", "the", "card", "payment", "about", "today", "with", "delivery",
    "need", "check", "transfer", "app", "balance", "question", "status", "number", "i", "it",
];

const AGENT_LINES: &[&str] = &[
    "Let me check that for you.",
    "Could you share your order number?",
    "One moment please.",
    "I am reviewing your account now.",
    "Is there anything else?",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    /// Probability that a user's curve follows their class pattern.
    pub signal_strength: f64,
    pub seed: u64,
    /// Mean of the Poisson number of extra conversations per user.
    pub extra_conversations_mean: f64,
    /// Poisson mean of the longest conversation length (minus one).
    pub length_mean: f64,
    pub star_noise_sd: f64,
    pub agent_message_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_users: 2000,
            signal_strength: 0.8,
            seed: 0,
            extra_conversations_mean: 1.39,
            length_mean: 12.85,
            star_noise_sd: 0.6,
            agent_message_rate: 0.5,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let ok = self.n_users > 0
            && (0.0..=1.0).contains(&self.signal_strength)
            && self.extra_conversations_mean >= 0.0
            && self.length_mean > 0.0
            && self.star_noise_sd >= 0.0
            && (0.0..=1.0).contains(&self.agent_message_rate);
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid synth config {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Curve {
    a: f64,
    b: f64,
    c: f64,
}

impl Curve {
    fn at(&self, t: f64) -> f64 {
        let u = t - 0.5;
        self.a + self.b * u + self.c * (u * u - 1.0 / 12.0)
    }
}

fn class_shape(klass: NpsClass, signaled: bool, rng: &mut ChaCha8Rng) -> (Curve, f64) {
    let a = 2.1 + rng.random_range(-0.3..=0.3);
    if !signaled {
        let b = rng.random_range(-2.4..=2.4);
        let c = rng.random_range(-3.0..=3.0);
        return (Curve { a, b, c }, 0.0);
    }
    match klass {
        NpsClass::Promoter => (Curve { a, b: 2.4, c: 3.0 }, -1.5),
        NpsClass::Detractor => (Curve { a, b: -2.4, c: -3.0 }, 3.5),
        NpsClass::Passive => {
            let b = rng.random_range(-1.0..=1.0);
            (Curve { a, b, c: 0.0 }, 1.92)
        }
    }
}

fn nps_raw(klass: NpsClass, rng: &mut ChaCha8Rng) -> i64 {
    match klass {
        NpsClass::Promoter => rng.random_range(9..=10),
        NpsClass::Passive => rng.random_range(7..=8),
        NpsClass::Detractor => rng.random_range(0..=6),
    }
}

fn pick<'a>(words: &[&'a str], rng: &mut ChaCha8Rng) -> &'a str {
    words.choose(rng).expect("non-empty word list")
}

/// Text whose lexicon valence rounds to `star`.
fn message_text(star: usize, rng: &mut ChaCha8Rng) -> String {
    let (pos, neg) = match star {
        4 => (rng.random_range(1..=3), 0),
        3 => (3, 1),
        2 => {
            if rng.random_bool(0.5) {
                (0, 0)
            } else {
                (1, 1)
            }
        }
        1 => (1, 3),
        _ => (0, rng.random_range(1..=3)),
    };
    let mut words: Vec<&str> = Vec::new();
    words.extend((0..pos).map(|_| pick(POSITIVE_WORDS, rng)));
    words.extend((0..neg).map(|_| pick(NEGATIVE_WORDS, rng)));
    let fillers = rng.random_range(1..=4);
    words.extend((0..fillers).map(|_| pick(FILLER_WORDS, rng)));
    // shuffle word order so sentiment words are not always leading
    for i in (1..words.len()).rev() {
        let j = rng.random_range(0..=i);
        words.swap(i, j);
    }
    let mut text = words.join(" ");
    if let Some(first) = text.get_mut(0..1) {
        first.make_ascii_uppercase();
    }
    text.push('.');
    text
}

/// Star probabilities with `star` as argmax.
fn message_probs(star: usize, rng: &mut ChaCha8Rng) -> StarDistribution {
    let top = rng.random_range(0.45..=0.95);
    let weights: Vec<f64> = (0..N_STARS - 1).map(|_| rng.random_range(1.0..=2.0)).collect();
    let total: f64 = weights.iter().sum();
    let mut probs = [0.0; N_STARS];
    let mut others = weights.iter();
    for (k, p) in probs.iter_mut().enumerate() {
        *p = if k == star {
            top
        } else {
            (1.0 - top) * others.next().expect("four weights") / total
        };
    }
    StarDistribution::new(probs).expect("probabilities sum to one")
}

#[allow(clippy::too_many_arguments)]
fn conversation(
    cfg: &SynthConfig,
    user_id: &str,
    ordinal: usize,
    n_customer: usize,
    curve: Curve,
    noise: &Normal<f64>,
    rng: &mut ChaCha8Rng,
    scores: &mut Vec<ScoreRecord>,
) -> Conversation {
    let conversation_id = format!("{user_id}-c{ordinal:02}");
    let mut messages = Vec::new();
    for k in 0..n_customer {
        let t = if n_customer == 1 { 0.5 } else { k as f64 / (n_customer - 1) as f64 };
        let star = (curve.at(t) + noise.sample(rng)).round().clamp(0.0, 4.0) as usize;
        let index = messages.len();
        messages.push(Message {
            index,
            sender: Sender::Customer,
            text: message_text(star, rng),
            timestamp: None,
        });
        scores.push(ScoreRecord {
            conversation_id: conversation_id.clone(),
            message_index: Some(index),
            probs: message_probs(star, rng),
        });
        if rng.random_bool(cfg.agent_message_rate) {
            messages.push(Message {
                index: messages.len(),
                sender: Sender::Agent,
                text: pick(AGENT_LINES, rng).to_string(),
                timestamp: None,
            });
        }
    }
    let conv = Conversation {
        conversation_id: conversation_id.clone(),
        user_id: user_id.to_string(),
        messages,
    };
    scores.push(ScoreRecord {
        conversation_id,
        message_index: None,
        probs: lexicon_score(&conversation_text(&conv, DEFAULT_MAX_CHARS)),
    });
    conv
}

/// Generates a labeled corpus and matching precomputed scores. The
/// whole-conversation records equal what the lexicon scorer returns for the
/// same text; message records carry seeded probabilities around each
/// planted star.
pub fn generate(cfg: &SynthConfig) -> Result<(Corpus, Vec<ScoreRecord>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let classes = [NpsClass::Promoter, NpsClass::Passive, NpsClass::Detractor];
    let class_dist = WeightedIndex::new(CLASS_WEIGHTS).expect("positive weights");
    let extra_dist = (cfg.extra_conversations_mean > 0.0)
        .then(|| Poisson::new(cfg.extra_conversations_mean).expect("positive mean"));
    let noise = Normal::new(0.0, cfg.star_noise_sd).expect("finite sd");
    let width = cfg.n_users.to_string().len().max(5);

    let mut users = Vec::with_capacity(cfg.n_users);
    let mut scores = Vec::new();
    for u in 0..cfg.n_users {
        let user_id = format!("u{u:0width$}");
        let klass = classes[class_dist.sample(&mut rng)];
        let signaled = rng.random_bool(cfg.signal_strength);
        let (curve, shift) = class_shape(klass, signaled, &mut rng);
        let longest = 1 + Poisson::new(cfg.length_mean + shift)
            .expect("positive mean")
            .sample(&mut rng) as usize;
        let extra = extra_dist.as_ref().map_or(0, |d| d.sample(&mut rng) as usize);

        let mut conversations = Vec::with_capacity(1 + extra);
        conversations.push(conversation(
            cfg, &user_id, 1, longest, curve, &noise, &mut rng, &mut scores,
        ));
        let other_len = Poisson::new(cfg.length_mean).expect("positive mean");
        for k in 0..extra {
            let n = (1 + other_len.sample(&mut rng) as usize).min(longest);
            conversations.push(conversation(
                cfg, &user_id, k + 2, n, curve, &noise, &mut rng, &mut scores,
            ));
        }
        users.push(UserRecord {
            user_id,
            conversations,
            label: Some(label_from_nps(nps_raw(klass, &mut rng))?),
        });
    }
    Ok((
        Corpus {
            users,
            provenance: format!("synthetic (seed {}, signal {})", cfg.seed, cfg.signal_strength),
        },
        scores,
    ))
}
