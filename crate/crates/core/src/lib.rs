//! Low-light image enhancement with spiral-scanned WKV attention.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`], [`ops`], [`autograd`]: dense tensors, kernels and a
//!   reverse-mode tape.
//! * [`scan`]: spiral scan orders, the topology diagnostic and Q-Shift.
//! * [`wkv`]: bidirectional WKV attention and the ES-RWKV block.
//! * [`retinex`]: light preprocessing and Global Edge Retinex recomposition.
//! * [`bisab`]: the bilateral spectrum aligner used on skip connections.
//! * [`model`]: the assembled network, Haar sampling, cost accounting and
//!   weight files.
//! * [`loss`]: the MS²-Loss terms plus PSNR/SSIM.
//! * [`optim`]: Adam with cosine annealing.
//! * [`train`]: full-batch training on paired images.
//! * [`selftest`]: seeded verification suites runnable from the CLI.

// Index loops mirror the math in the numeric kernels.
#![allow(clippy::needless_range_loop)]

pub mod autograd;
pub mod bisab;
pub mod error;
pub mod init;
pub mod layers;
pub mod loss;
pub mod model;
pub mod ops;
pub mod optim;
pub mod retinex;
pub mod scan;
pub mod selftest;
pub mod tensor;
pub mod train;
pub mod wkv;

pub use autograd::{finite_diff_check, Gradients, Graph, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
