//! Sequential recommendation with an adversarial and contrastive VAE.
//!
//! The crate is organized bottom-up: [`tensor`] and [`autodiff`] provide a
//! small reverse-mode engine, [`data`] turns interaction logs into padded
//! batches, [`model`] defines the networks and losses, [`train`] runs the
//! alternating optimization and [`eval`] computes ranking metrics and
//! diagnostics.

pub mod autodiff;
pub mod container;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
