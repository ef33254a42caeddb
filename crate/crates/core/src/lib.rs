//! Post-training quantization hardened for continual test-time adaptation.
//!
//! The crate is organized around the pipeline it implements:
//!
//! - [`tensor`] / [`tape`] / [`nn`] / [`optim`] — a small dense-tensor
//!   engine with reverse-mode differentiation, enough to train, quantize,
//!   and adapt compact convolutional classifiers;
//! - [`quant`] — affine quantization: min-max and MSE-grid calibration,
//!   fake quantization with straight-through gradients, and SNR-motivated
//!   per-channel weight regularization;
//! - [`recon`] — block-wise reconstruction of quantization parameters with
//!   perturbation-consistency objectives;
//! - [`tta`] — online adaptation of the quantized model over corruption
//!   streams, with entropy or logit-balanced objectives;
//! - [`data`] — synthetic datasets, corruption functions at graded
//!   severities, and domain-stream construction;
//! - [`harness`] — experiment configs, source training, error
//!   decomposition, and the run matrix behind the CLI.
//!
//! Built with the `parallel` feature (default), batch kernels run on rayon;
//! without it everything is sequential. Both paths produce bit-identical
//! results.

pub mod data;
pub mod error;
pub mod harness;
pub mod io;
pub mod kernels;
pub mod nn;
pub mod optim;
pub mod par;
pub mod quant;
pub mod recon;
pub mod seeds;
pub mod tape;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
pub use par::Parallelism;
pub use tensor::Tensor;
