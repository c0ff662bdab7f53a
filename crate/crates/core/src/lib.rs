//! dnres-forge: training and inference for cascade-trained residual
//! denoising networks, with depthwise evolution for compute-constrained
//! deployment.
//!
//! The crate is self-contained: convolution forward/backward, Adam, noise
//! synthesis (Gaussian, Poisson, Poisson-Gaussian), edge-aware losses,
//! PSNR/SSIM, PGM image I/O, a binary checkpoint format, and the cascade
//! and evolution orchestrators all live here. Every random draw flows from
//! a named stream keyed by (seed, role, index), so training runs, noise
//! realizations, and evaluations are bitwise reproducible.
//!
//! Layout:
//! * [`tensor`], [`ops`], [`optim`]: NCHW tensors, conv kernels (GEMM fast
//!   path plus naive reference oracles), SGD/Adam.
//! * [`topology`], [`network`]: layer graphs with provenance, parameter and
//!   MAC accounting, forward/backward.
//! * [`noise`], [`loss`], [`metrics`]: degradation models with statistical
//!   self-checks, MSE and edge-aware losses, PSNR/SSIM.
//! * [`data`], [`pgm`], [`synthetic`]: manifests, patch extraction,
//!   batching, image I/O, a deterministic toy corpus.
//! * [`train`], [`eval`], [`checkpoint`], [`gradcheck`]: cascade growth,
//!   depthwise evolution, whole-image denoising, serialization, and
//!   finite-difference gradient verification.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod metrics;
pub mod network;
pub mod noise;
pub mod ops;
pub mod optim;
pub mod pgm;
pub mod rng;
pub mod synthetic;
pub mod tensor;
pub mod topology;
pub mod train;

pub use error::{Error, Result};
pub use network::Network;
pub use tensor::{Shape, Tensor};
pub use topology::Topology;
