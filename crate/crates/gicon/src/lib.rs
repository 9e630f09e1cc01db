//! GICON: in-context operator learning on station graphs.
//!
//! A query is a window of recent frames on a sensor graph; contextual
//! examples are (history window, future frame) pairs sharing the query's
//! time gap. The model interleaves projected keys and values into one
//! sequence, alternates graph message passing with per-node causal attention
//! biased by example-level similarities, and decodes a prediction at every
//! key position. Around the model sit a retrieval index for example
//! selection, a synthetic dataset generator, a training loop, evaluation
//! protocols, and a CLI.

pub mod cli;
pub mod config;
pub mod eval;
pub mod graph;
pub mod model;
pub mod retrieval;
pub mod rng;
pub mod tensor;
pub mod train;
