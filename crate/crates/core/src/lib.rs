//! Locate-and-update editing of language-agnostic factual neurons in a
//! small decoder-only transformer.
//!
//! The crate is organized around the stages of the editing pipeline:
//!
//! - [`tensor`]: dense tensors with reverse-mode automatic differentiation
//!   on a Wengert tape, plus Adam and a finite-difference gradient checker.
//! - [`model`]: the subject transformer (classic and gated FFN variants),
//!   activation recording, value injection, sampling, and toy training.
//! - [`data`]: edit-group schema and the synthetic parallel bilingual
//!   fact-world generator.
//! - [`locator`]: activation counting, thresholding into per-language
//!   factual-neuron sets, and cross-language intersection.
//! - [`editor`]: optimization of a shared additive patch over the located
//!   neurons at the last subject-token position.
//! - [`cache`]: subject-keyed patch store and gated greedy decoding.
//! - [`eval`]: EM / token-F1 metrics over the four edit-quality categories.
//! - [`pipeline`]: locate → edit → evaluate orchestration, ablation
//!   variants, sweeps, and the monolingual/multilingual comparison.
//!
//! Everything is deterministic per seed: reductions run in a fixed
//! left-to-right order and all randomness flows through seeded ChaCha8
//! streams, so repeated runs are bit-identical.

#![cfg_attr(not(feature = "std"), no_std)]
#![deny(unsafe_code)]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod cache;
pub mod data;
pub mod editor;
pub mod error;
pub mod eval;
pub mod locator;
pub mod model;
pub mod pipeline;
pub mod seeds;
pub mod tensor;

pub use error::{Error, Result};
