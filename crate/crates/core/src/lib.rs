//! Decision-aware tool usage for language-model agents.
//!
//! The crate covers the full loop: a validated tool pool ([`registry`]),
//! description embeddings ([`embedding`]) and their k-means clustering
//! ([`clustering`]), candidate toolset sampling ([`sampling`]), dataset
//! generation ([`datagen`]), model backends and API executors
//! ([`backends`]), the two-level decision runtime ([`runtime`]) and decision
//! and text-similarity metrics ([`eval`]).

pub mod backends;
pub mod clustering;
pub mod datagen;
pub mod embedding;
pub mod eval;
pub mod http;
pub mod par;
pub mod registry;
pub mod rng;
pub mod runtime;
pub mod sampling;
