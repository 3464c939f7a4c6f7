//! Modular contextual language modeling at desk scale.
//!
//! The model ensemble is built from independently trainable parts: an
//! auto-regressive sentence encoder, a context encoder that folds a bag of
//! context strings into a single cue vector, and a decoder that fuses the
//! two. A unigram-autoencoder proxy lets the decoder be trained with no real
//! context at all; a later adaptation phase retrains only the context
//! encoder against the frozen decoder.

pub mod checkpoint;
pub mod context_encoder;
pub mod corpus;
pub mod decoder;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod proxy;
pub mod rng;
pub mod sentence_encoder;
pub mod training;

pub use error::{CueError, Result};
