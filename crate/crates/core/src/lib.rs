//! Continual training of a self-attentive next-item recommender across update
//! cycles, with exemplar replay and adaptively weighted knowledge distillation.
//!
//! The crate is organised bottom-up:
//!
//! * [`data`] ingests click logs, filters them, splits them into update cycles
//!   and generates synthetic drifting streams.
//! * [`model`] is the recommender itself: embeddings, causal self-attention
//!   blocks, a shared-embedding decoder, exact reverse-mode gradients and Adam.
//! * [`losses`] holds cross-entropy, distillation, the adaptive weight and the
//!   EWC penalty.
//! * [`exemplar`] allocates replay quotas and selects exemplars.
//! * [`harness`] runs the train-then-evaluate protocol for every method.
//! * [`metrics`] ranks targets and computes Recall@k / MRR@k.
//! * [`config`], [`report`] and [`commands`] back the command-line tool.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod exemplar;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
