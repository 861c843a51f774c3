//! Desk-scale time-series language model and evaluation harness.
//!
//! The pipeline: a deterministic router picks a patch expert whose
//! non-overlapping 1-D convolution turns a flattened signal into 100-200
//! patch embeddings; cross-attention against a prototype bank derived from
//! the vocabulary embedding table re-expresses those patches in the
//! backbone's hidden space; a small decoder-only transformer consumes
//! series and prompt embeddings and feeds either a byte-level text head or
//! a bank of fixed-length regression heads. Training combines text
//! cross-entropy and series regression in joint steps with DoRA adapters
//! on the backbone and head weights.

pub mod backbone;
pub mod config;
pub mod dataset;
pub mod encoder;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;
