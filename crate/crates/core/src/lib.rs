//! Discrete speech-unit pretraining for multilingual lip reading.
//!
//! The pipeline quantizes continuous audio/visual feature streams into
//! compact unit IDs, pretrains a unit-to-text encoder-decoder while audio
//! units are progressively masked out, then finetunes on continuous visual
//! features. Everything runs on seeded synthetic corpora.

pub mod curriculum;
pub mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod numerics;
pub mod quantizer;
pub mod seed;
pub mod synth;
pub mod tokenizer;
pub mod units;

pub use error::{Error, Result};
