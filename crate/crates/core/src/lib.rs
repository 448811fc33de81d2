//! Toolkit for captioning short synthetic videos with a learnable sparse
//! attention mask over video tokens.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod decode;
pub mod error;
pub mod gradcheck;
pub mod gradsuite;
pub mod masktools;
pub mod metrics;
pub mod model;
pub mod multimodal;
pub mod rng;
pub mod scene;
pub mod tensor;
pub mod text;
pub mod training;
pub mod video;

pub use error::{Error, Result};
