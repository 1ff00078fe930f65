//! Supervised cluster-level contrastive learning (SCCL) for emotion
//! recognition in conversations, at desk scale.
//!
//! Utterance representations are projected into a three-dimensional
//! Valence-Arousal-Dominance space, and per-emotion cluster means of those
//! projections are contrasted against emotion prototypes. The crate bundles
//! everything needed to run that end to end without external weights:
//! a small autodiff engine ([`tensor`]), dialogue corpora and a synthetic
//! generator ([`corpus`]), prototype tables ([`prototypes`]), a toy
//! context-aware encoder with adapter fusion ([`encoder`]), the training
//! objectives ([`losses`]), evaluation ([`metrics`]) and the training and
//! experiment drivers ([`trainer`]).

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod losses;
pub mod metrics;
pub mod prototypes;
pub mod tensor;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
