pub mod attributes;
pub mod datagen;
pub mod diffmath;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod harness;
pub mod losses;
pub mod metrics;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{BlockParams, FeatureMap, GradStore, ParamId, Tensor};
