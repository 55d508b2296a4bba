//! Zero-shot, open-vocabulary scene graph generation.
//!
//! An image goes through object detection and depth estimation, object pairs
//! are pruned geometrically, each remaining pair is captioned from a
//! highlighted crop, an LLM turns captions into `(subject, predicate, object)`
//! triplets, and a VQA model confirms each triplet before the graph is
//! assembled. All models are reached through [`backends`]; nothing runs
//! in-process. [`retrieval`] evaluates graphs on sentence-to-graph retrieval.

pub mod backends;
pub mod captioning;
pub mod error;
pub mod extraction;
pub mod geometry;
pub mod graph;
pub mod pipeline;
pub mod retrieval;
pub mod stats;
pub mod validation;

pub use error::{Error, Result};
