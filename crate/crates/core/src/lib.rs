//! Multi-scale temporal difference transformer for video-text retrieval over
//! pre-extracted frame and caption embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense `f64` matrices and a reverse-mode tape.
//! - [`encoder`]: masked multi-head self-attention encoder.
//! - [`temporal`]: subset partitioning, difference tokens, short-term and
//!   long-term branches and their fusions; [`model`] wires them together.
//! - [`objective`]: cosine similarities, binary similarity loss, symmetric
//!   cross entropy.
//! - [`eval`]: R@k, MedR, MeanR and Rsum.
//! - [`data`], [`checkpoint`]: file formats, synthetic data, batching.
//! - [`config`], [`train`], [`gradcheck`]: the experiment harness behind the
//!   `mstdt` binary.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod objective;
pub mod temporal;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
