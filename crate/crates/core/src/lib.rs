//! Two-stage co-speech gesture video generation at desk scale.
//!
//! Stage 1 learns to animate a source frame from a latent motion feature
//! (pose encoder, flow decoder, deviation-gated feature decoder). Stage 2 is
//! an audio-conditioned diffusion model over sequences of motion features.
//! The crate also ships a procedural clip generator and the evaluation
//! metrics used to compare generated and reference clips.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod deviation_decoder;
pub mod error;
pub mod image;
pub mod kernels;
pub mod latent_diffusion;
pub mod metrics;
pub mod motion_latent;
pub mod nn;
pub mod par;
pub mod pipeline;
pub mod seeding;
pub mod stage1_losses;
pub mod synthetic_data;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
