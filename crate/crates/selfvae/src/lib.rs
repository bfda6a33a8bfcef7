//! Self-supervised hierarchical VAE with a bijective flow prior.
//!
//! The crate is a small, self-contained generative-modelling stack in f64:
//! a reverse-mode autodiff tensor core, probability building blocks,
//! a RealNVP-style prior, deterministic image transforms, convolutional
//! encoder/decoder networks, ELBO objectives and the training, sampling and
//! reconstruction pipelines behind the `selfvae` binary.
//!
//! With the default `parallel` feature the heavy kernels fan out over
//! rayon; disabling it runs everything sequentially with bit-identical
//! results.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dist;
pub mod error;
pub mod flow;
pub mod model;
pub mod nets;
pub mod objectives;
pub mod optim;
pub mod oracle;
pub mod pipelines;
pub mod par;
pub mod store;
pub mod tensor;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// The crate-wide seeded RNG (small, fast, reproducible across platforms).
pub type SeedRng = rand_chacha::ChaCha8Rng;
