//! Speaker-embedding de-mixing.
//!
//! Step one trains a residual-TDNN speaker-embedding extractor (with a
//! speaker classifier on top) on clean speech and averages per-speaker
//! embeddings into a bank. Step two freezes the extractor, embeds
//! two-speaker mixtures, and trains a small de-mixing head that maps the
//! mixture embedding plus one speaker's clean embedding to the other
//! speaker's embedding.

pub mod audio;
pub mod config;
pub mod autodiff;
pub mod demix;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod mixer;
pub mod pipeline;
pub mod rng;
pub mod store;

pub use error::{Error, ErrorKind, Result};
