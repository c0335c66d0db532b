//! Registration-guided myocardial strain and late mechanical activation (LMA)
//! estimation on synthetic paired cine/DENSE-style image sequences.
//!
//! The crate is organised bottom-up:
//!
//! - [`strain`]: warping, Green–Lagrange strain, sector partitions, strain
//!   matrices, TOS extraction, LMA flags and low-rank projection.
//! - [`phantom`]: an annulus phantom with analytic motion and ground truth.
//! - [`nn`]: a small generic convolutional toolkit with hand-written
//!   backward passes and an Adam optimizer.
//! - [`registration`]: the encoder-decoder registration network, the image
//!   data term and the Sobolev-style displacement regulariser.
//! - [`joint`]: strain and TOS heads, the joint loss and the training loop.
//! - [`eval`]: TOS error, LMA accuracy and the classical registration baseline.
//! - [`recon3d`]: 3D activation surfaces from sliced TOS curves, PLY export.
//! - [`io`]: the raw little-endian `f32` + `meta.json` directory format.

pub mod error;
pub mod eval;
pub mod io;
pub mod joint;
pub mod nn;
pub mod phantom;
pub mod recon3d;
pub mod registration;
pub mod strain;

pub use error::{Error, Result};
