//! Allocation-only core of the DualMAR pipeline.
//!
//! Everything here is pure computation over in-memory values: knowledge-graph
//! normalization, prompt rendering and parsing for triple harvesting, polar
//! (modulus + phase) KG embedding, EHR data modelling with a planted-structure
//! generator, co-occurrence graphs, the encoder/decoder network with its
//! hand-written backward rules, and evaluation metrics.
//!
//! File formats, checkpoints and the command line live in the `dualmar` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod ehr;
pub mod graph;
pub mod harvest;
pub mod kg;
pub mod kge;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod suite;
