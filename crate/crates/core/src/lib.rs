//! Disentangled gradient learning for multimodal classifiers.
//!
//! Encoders are trained only by modality-dropout unimodal losses, while the
//! fusion module and classifier are trained only by a multimodal loss computed
//! on detached representations. The crate ships its own reverse-mode engine,
//! the closed-form gradient-suppression analysis with numerical oracles, a
//! synthetic multimodal data generator and a CLI experiment runner.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod model;
pub mod rng;
pub mod synthdata;
pub mod train;

pub use error::{Error, Result};
