//! Collaborative low-rank weight generation for a frozen decoder-only language
//! model used as a Yes/No recommender.
//!
//! Pipeline: a collaborative-filtering model ([`cf`]) exports user and item
//! embeddings, a query generator ([`generator`]) turns each pair into low-rank
//! weight deltas, and a frozen toy language model ([`lm`]) scores a text prompt
//! with those deltas merged into its linear layers. [`train_eval`] trains the
//! generator and computes AUC/UAUC on warm and cold test subsets.

pub mod cf;
pub mod cli;
pub mod data;
pub mod error;
pub mod generator;
pub mod lm;
pub mod numerics;
pub mod train_eval;

pub use error::{CoraError, Result};
