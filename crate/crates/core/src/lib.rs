//! Conditional denoising diffusion for word images: printed-image, text and
//! writer-style conditioned noise prediction, training, ancestral sampling,
//! a synthetic styled-glyph corpus and an evaluation harness.

pub mod checkpoint;
pub mod conditioning;
pub mod denoiser;
mod error;
pub mod eval;
pub mod font;
pub mod image;
pub mod manifest;
pub mod nn;
pub mod par;
pub mod sampler;
pub mod schedule;
pub mod synthcorpus;
pub mod trainer;
pub mod vocab;

pub use error::{Error, ErrorKind, Result};
pub use glyphdiff_substrate as substrate;
