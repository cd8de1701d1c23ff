//! Minimal tensor and autodiff machinery for the GAN and the detector.

pub mod archive;
pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use archive::Archive;
pub use graph::{Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamSet};
pub use tensor::Tensor;
