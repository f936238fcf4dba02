//! Evidential 3D segmentation: a slim UNet-style feature extractor followed
//! by a prototype-based Dempster-Shafer head that outputs, for every voxel,
//! masses on lymphoma, background, and ignorance.

pub mod backbone;
pub mod config;
pub mod checkpoint;
pub mod conv;
pub mod dataset;
pub mod evidential;
pub mod gradcheck;
pub mod graph;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod ops;
pub mod phantom;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod volume;

pub use graph::{Gradients, Graph, GraphError, ParamSet, Var};
pub use tensor::{Real, Tensor, TensorError};
