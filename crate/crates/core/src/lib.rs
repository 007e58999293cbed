//! Counterfactual explanations by gradient search in the latent space of a
//! semi-supervised variational autoencoder, guided by a Gaussian-leaf
//! sum-product network that acts both as classifier and as density model.
//!
//! The crate is organised along the processing pipeline:
//!
//! * [`data`] synthetic generators, PGM image I/O and group-aware splits,
//! * [`neural`] a small dense-network substrate with reverse-mode gradients and Adam,
//! * [`vae`] the semi-supervised VAE with a classifier head,
//! * [`circuit`] and [`structlearn`] the sum-product network and its structure learner,
//! * [`counterfactual`] the latent counterfactual optimiser,
//! * [`metrics`] validity, proximity, Fréchet distance and classifier statistics,
//! * [`pipeline`] the staged experiment runner used by the `spncf` binary.

pub mod circuit;
pub mod counterfactual;
pub mod data;
mod error;
pub mod metrics;
pub mod neural;
pub mod par;
pub mod pipeline;
pub mod structlearn;
pub mod vae;

pub use error::{Error, Result};
