//! Text-guided person re-identification: a small autodiff engine, text
//! front end, encoders, association losses, synthetic data and evaluation.

pub mod association;
pub mod config;
pub mod datagen;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod evalkit;
pub mod gradsuite;
pub mod model;
pub mod pipeline;
pub mod textpipe;

pub use error::{Error, Result};
