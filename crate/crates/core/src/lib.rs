//! Desk-scale laboratory for backdoor data poisoning against models with
//! frozen feature encoders.
//!
//! The crate builds the full attack-and-defense loop on bespoke
//! differentiable toy encoders: a synthetic image-instruction-response
//! corpus, contrastive optimization of an image trigger patch, character
//! level beam search for a text trigger, data poisoning, a frozen-encoder
//! surrogate victim with a trainable linear readout, attack metrics, and
//! detection/noise defenses. Everything is deterministic under explicit
//! seeds.

pub mod canon;
pub mod corpus;
pub mod defense;
pub mod encoders;
pub mod error;
pub mod image;
pub mod numerics;
pub mod trigger_image;
pub mod trigger_text;
pub mod victim;

pub use error::{Error, Result};
