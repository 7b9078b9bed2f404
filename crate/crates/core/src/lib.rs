//! Forward-pass kernels for UCAN-style super-resolution networks.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`ops`], [`conv`]: the dense `(n, c, h, w)` tensor and its primitives
//! * [`feature_map`]: kernel feature maps for linear attention (ReLU, ELU+1, symmetric ReLU, Hedgehog)
//! * [`attention`]: softmax, linear (both evaluation orders) and tiled exact attention, plus windowed MHSA
//! * [`dual_fusion`]: the Dual Fusion Layer (Hedgehog spatial branch + channel attention) and its share/receive forms
//! * [`large_kernel`]: Large Kernel Distillation and closed-form receptive fields
//! * [`network`]: block assembly and the full forward pipeline
//! * [`analysis`]: numerical rank, impulse-response ERF, MAC accounting and attention benchmarks
//!
//! Every op reports multiply-accumulates and temporary allocations to [`profile`] when a
//! counting scope is active; counting never changes numerical results.

pub mod analysis;
pub mod attention;
pub mod conv;
pub mod dual_fusion;
pub mod error;
pub mod feature_map;
pub mod io;
pub mod large_kernel;
pub mod network;
pub mod ops;
pub mod profile;
pub mod rng;
pub mod tensor;

#[cfg(test)]
mod invariant_tests;

pub use error::{Error, Result};
pub use rng::Rng;
pub use tensor::{Matrix, Tensor};
