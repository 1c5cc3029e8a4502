//! Latent degradation trajectories learned by spline flow matching.
//!
//! The crate is organised bottom-up: [`numcore`] supplies tensors and
//! autodiff, [`spline`] builds the natural cubic trajectory through knot
//! latents, [`rae`] is the autoencoder with HR skip features, [`lfm`] trains
//! the velocity field, [`sampler`] integrates it, and [`degsim`] produces the
//! synthetic multi-scale data.

pub mod checkpoint;
pub mod degsim;
pub mod error;
pub mod image;
pub mod lfm;
pub mod numcore;
pub mod par;
pub mod rae;
pub mod sampler;
pub mod spline;

pub use error::{Error, Result};
