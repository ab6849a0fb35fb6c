//! Volumetric image classification with 3D CNNs and layer-wise relevance
//! propagation (LRP) heatmaps.

pub mod error;
pub mod layers;
pub mod lrp;
pub mod modelstore;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use error::{Error, Result};
pub use tensor::Tensor;
