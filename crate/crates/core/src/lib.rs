//! Mammography classification with gated sequential mixtures of selective
//! state-space and attention experts, built on a small reverse-mode
//! autodiff engine.

pub mod autograd;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod seqmoe;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
