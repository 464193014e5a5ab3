//! Persona-conditioned rewrite chains over news articles, scored by a
//! question-answering auditor.
//!
//! A run fans each source article out into `B` branches of `K` successive
//! rewrites. Every node is audited against a fixed set of factual questions;
//! the distance of its answers from the all-correct vector is the node's
//! misinformation index, and the branch average is its propagation rate.

pub mod agents;
pub mod auditor;
pub mod chat;
pub mod corpus;
pub mod engine;
pub mod metrics;
pub mod report;
pub mod rng;
