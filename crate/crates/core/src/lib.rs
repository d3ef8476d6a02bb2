//! Few-shot segmentation with cross-view graph alignment, built on a small
//! reverse-mode autodiff engine.

pub mod autodiff;
pub mod config;
pub mod dfm;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod exec;
pub mod gat;
pub mod geometry;
pub mod graph;
pub mod model;
pub mod optim;
pub mod params;
pub mod svga;
pub mod tensor;
pub mod train;
pub mod vrp;

pub use error::{Result, VineError};
pub use tensor::Tensor;
