//! Spiking audio-visual zero-shot learning.
//!
//! A dual-stream classifier for paired audio/visual feature sequences: a
//! recurrent semantic stream models scene context, while a motion stream
//! converts the sequences into sparse polarity events and processes them
//! with spiking networks (a plain spiking MLP, or a spiking transformer
//! with multi-stage timestep shrinkage). Both streams fuse through
//! cross-modal attention and project into a shared class-embedding space
//! where seen and unseen classes are ranked by distance.
//!
//! Everything runs on CPU over f64 with a built-in reverse-mode tape, so
//! gradients are checkable against finite differences end to end.

pub mod cli;
pub mod data;
pub mod error;
pub mod events;
pub mod exec;
pub mod fusion;
pub mod gradcheck;
pub mod gradsuite;
pub mod io;
pub mod model;
pub mod nn;
pub mod semantic;
pub mod spiking;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{SurrogateKind, Tape, Tensor};
