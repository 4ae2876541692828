//! Energy-guided score-based diffusion for paired cross-modality image
//! translation, built framework-free on hand-derived gradients.
//!
//! The pipeline: a variance-preserving noise schedule ([`schedule`]), a
//! conditional score-matching denoiser ([`score`], [`unet`]) trained by
//! [`trainer`], task-specific guidance energies on landmarks and
//! high-frequency content ([`guidance`]), and a reverse-SDE sampler
//! ([`sampler`]) that translates images between two synthetic modalities
//! ([`synth`]). Translation quality and downstream classification are scored
//! by [`eval`].

pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod filters;
pub mod guidance;
pub mod nn;
pub mod pgm;
pub mod rng;
pub mod sampler;
pub mod schedule;
pub mod score;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::Image;
