//! Codebook-guided bootstrapping for self-supervised image representation
//! learning, built on a small reverse-mode autodiff engine.

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod layers;
pub mod model;
pub mod objectives;
pub mod optim;
pub mod params;
pub mod rng;
pub mod train;
pub mod vq;

pub use error::{Error, Result};
