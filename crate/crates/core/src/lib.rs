pub mod attributions;
pub mod autodiff;
pub mod binio;
pub mod config;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod imaging;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod pipeline;
pub mod render;
pub mod tensor;

pub use autodiff::{BackwardMode, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
