//! Core of the `avtx` audio-visual speech recognition stack.
//!
//! Everything in this crate is pure computation over in-memory buffers and
//! builds without `std` (only `alloc` is required):
//!
//! - [`tensorops`]: a dense tensor engine with reverse-mode differentiation
//!   and per-op FLOP/parameter instrumentation.
//! - [`audio`]: 16 kHz waveform to 240-d stacked log-mel features, plus the
//!   additive-noise and overlapped-speech corruptions used for evaluation.
//! - [`video`]: frame-rate synchronization, pixel normalization and tubelet
//!   extraction for 128x128 mouth tracks.
//! - [`conv_frontend`] / [`vit_frontend`]: the (2+1)D VGG and the tubelet
//!   transformer video front-ends.
//! - [`avmodel`]: fusion, the transformer encoder, the RNN-T prediction and
//!   joint networks, the transducer loss, greedy decoding and WER.
//! - [`training`]: learning-rate schedules, Adam, synthetic tasks and the
//!   training loop.
//!
//! File formats, wall-clock measurement and the command line live in the
//! `avtx` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod audio;
pub mod avmodel;
pub mod config;
pub mod conv_frontend;
mod error;
pub mod scalar;
pub mod tensorops;
pub mod training;
pub mod video;
pub mod vit_frontend;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensorops::{CostReport, Graph, ParamStore, Tensor, Var};
