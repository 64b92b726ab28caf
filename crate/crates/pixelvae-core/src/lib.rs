//! PixelVAE core: a dependency-light implementation of a variational
//! autoencoder whose decoder (and, in the two-level hierarchy, whose latent
//! prior) is an autoregressive masked-convolution network.
//!
//! The crate is built bottom-up:
//!
//! - [`tensor`]: dense f64 tensors with reverse-mode autodiff over a
//!   define-by-run graph.
//! - [`nn`]: convolution family (strided, transposed, masked) plus the gated
//!   activation block and receptive-field probing.
//! - [`dist`]: reparameterized diagonal Gaussians, Bernoulli and 256-way
//!   categorical pixel likelihoods.
//! - [`model`]: encoder trunk, latent levels, conditional-PixelCNN decoder,
//!   PixelCNN latent prior, and the decoder variants.
//! - [`objective`]: ELBO with per-level KL breakdown and importance-sampled
//!   marginal NLL.
//! - [`sampler`]: ancestral generation with per-level noise streams and PGM
//!   tiling.
//! - [`data`]: IDX parsing, binarization, a synthetic rectangle corpus, and
//!   batch iteration.
//! - [`optim`] / [`checkpoint`]: Adam with gradient clipping and a bit-exact
//!   checkpoint byte format.
//!
//! Everything here is `no_std` + `alloc` compatible; file and clock access
//! live in the companion `pixelvae` crate. All math goes through `libm` so
//! results are identical with and without `std`.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod checkpoint;
pub mod data;
pub mod dist;
pub mod error;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod rng;
pub mod sampler;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{GradientMap, Tensor};
