//! Few-shot relation extraction with label prompt dropout.
//!
//! The crate covers the whole pipeline on synthetic data: a knowledge graph
//! and sentence generator with distant supervision, a word-level tokenizer
//! with entity markers and label prompts, a small transformer encoder with
//! hand-written gradients, contrastive pre-training, episodic prototypical
//! training, and the evaluation and ablation protocol.

pub mod commands;
pub mod config;
pub mod corpus;
pub mod encoder;
pub mod episodic;
pub mod model;
pub mod pipeline;
pub mod pretrain;
pub mod error;
pub mod eval;
pub mod rng;
pub mod tokenizer;

pub use error::{LpdError, Result};
