//! Core algorithms for speech-image semantic alignment.
//!
//! Everything in this crate is pure computation over heap-allocated buffers:
//! a small reverse-mode autodiff engine with the primitives needed by the two
//! embedding branches, MFCC extraction, the audio (Conv1d + Bi-GRU +
//! attention) and image (DenseNet) embedders, the batch hinge objective,
//! Adam with cosine-annealing schedules, and recall@K retrieval metrics.
//!
//! The crate is `no_std` (with `alloc`); IO, file formats and the CLI live in
//! the companion `sia` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod attention;
pub mod audio;
pub mod error;
pub mod gru;
pub mod image;
pub mod mfcc;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod recall;
pub mod scalar;
pub mod schedule;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tape::{ParamStore, Tape, Var};
pub use tensor::Tensor;
