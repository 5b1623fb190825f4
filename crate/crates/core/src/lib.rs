//! Multi-level attention fusion network (MAFnet) for audio-visual event
//! recognition, built on a small double-precision reverse-mode engine.
//!
//! The pipeline per video: per-clip visual and audio feature maps, optional
//! residual blocks with FiLM lateral conditioning between the two paths,
//! spatial average pooling, a projection of each modality to a shared width,
//! temporal / modality / joint attention, one of four fusion operators, and a
//! linear classifier. Training uses cross-entropy with Adam, early stopping
//! and a random drop of visual-path updates.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod layers;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Shape, Tape, Tensor, Var};
