//! Autoregressive video pretraining over spatiotemporal cluster elements.
//!
//! Videos are cut into non-overlapping cubes ([`tokenizer`]), cubes are
//! grouped into clusters that are predicted one after another in a chosen
//! order ([`layout`]), and a block-causal encoder with a cross-attention-only
//! decoder regresses every target cluster's cubes in a single parallel pass
//! ([`model`]). [`trainer`] runs pretraining and probing, [`costmodel`]
//! does the sequence-length and FLOPs accounting.

pub mod config;
pub mod costmodel;
pub mod error;
pub mod layout;
pub mod model;
pub mod rng;
pub mod tokenizer;
pub mod trainer;
pub mod video;

pub use error::{Error, FormatError, Result};
