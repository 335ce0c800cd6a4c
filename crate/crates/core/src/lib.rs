//! Simulation of accelerated MRI acquisition and reconstruction of
//! fully-sampled T2-weighted images from subsampled T2 plus FLAIR pairs.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`graph`] and [`gradcheck`]: a small reverse-mode
//!   differentiation engine with exactly the operators the network needs.
//! * [`kspace`]: centered orthonormal FFTs, line masks and zero-filled
//!   reconstruction.
//! * [`metrics`]: MSE, SSIM/DSSIM, PSNR and the composite training loss.
//! * [`model`]: the multimodal Dense U-Net and its unimodal baseline.
//! * [`train`]: Adam, early stopping, evaluation.
//! * [`data`]: paired phantoms, raw image I/O and dataset manifests.
//! * [`pipeline`]: file-level commands with replayable run manifests.
//!
//! Kernels that are data-parallel (convolution planes, corpus loops) run on
//! rayon when the `parallel` feature is enabled. Every parallel loop writes
//! disjoint outputs with a fixed per-output summation order, so results are
//! bit-identical regardless of thread count.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod image;
mod kernels;
pub mod kspace;
pub mod metrics;
pub mod model;
pub mod par;
pub mod pipeline;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use image::{Image, Role};
pub use tensor::Tensor;
