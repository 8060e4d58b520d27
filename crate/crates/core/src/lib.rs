//! Discriminative image generation for zero-shot learning.
//!
//! A category discrimination model (frozen backbone plus a projector into the
//! text-prototype space) is trained on seen classes only. For every unseen
//! class a fresh prompt token is added to the text encoder's vocabulary and
//! its embedding is optimized so that images sampled from a text-conditioned
//! diffusion generator are classified as that class. The generated images then
//! train the final zero-shot classifier.

pub mod cdm;
pub mod config;
pub mod data;
pub mod classifier;
pub mod dct;
pub mod diffusion;
pub mod evaluator;
pub mod error;
pub mod nn;
pub mod optim;
pub mod prototypes;
pub mod store;
pub mod tape;

pub use error::{Error, Result};
