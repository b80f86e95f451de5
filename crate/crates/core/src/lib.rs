//! Text-promptable instance segmentation of deformable linear objects.

pub mod augment;
pub mod autograd;
pub mod backbone;
pub mod classifier;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod losses;
pub mod mask;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod positional;
pub mod prompt_encoder;
pub mod schedule;
pub mod tensor_io;
pub mod trainer;

pub use error::{Error, Result};
