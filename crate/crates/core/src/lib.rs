//! Promoter / non-promoter prediction from the message-wise sentiment
//! dynamics of customer-support chats.
//!
//! The pipeline runs corpus ingestion and preprocessing ([`corpus`]),
//! five-star sentiment scoring ([`sentiment`]), curve transforms
//! ([`dynamics`]), per-user feature assembly ([`features`]), gradient-boosted
//! trees ([`model`]), exact TreeSHAP attribution ([`explain`]) and
//! evaluation ([`eval`]). [`synth`] generates seeded corpora with a planted
//! dynamics signal for offline verification.

pub mod corpus;
pub mod dynamics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod explain;
pub mod features;
pub mod io;
pub mod model;
pub mod sentiment;
pub mod synth;

pub use error::{Error, Result};
