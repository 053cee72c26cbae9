//! Allocation-only core of a joint schema-linking / SQL-generation pipeline.
//!
//! Everything here is pure computation over in-memory values: SQL scope
//! analysis, DDL serialization with marker tokens, word-level tokenization,
//! attention-mask construction, a small reverse-mode autodiff engine, the toy
//! decoder model with its linking head, noisy-schema sampling, ranking
//! metrics and the training / inference procedures. Databases, files and the
//! command line live in the `jolt` companion crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod schema;
pub mod sql;
pub mod tokenizer;
pub mod mask;
pub mod autodiff;
pub mod model;
pub mod sampler;
pub mod metrics;
pub mod pipeline;
