//! Richly activated graph convolutional networks for skeleton-based action
//! recognition, built on a small reverse-mode autodiff tape.
//!
//! Several ST-GCN streams look at the same skeleton clip. Each stream after
//! the first sees the input gated by a mask that suppresses the joints the
//! earlier streams already rely on, which pushes the model to find
//! discriminative evidence across more of the body.

pub mod activation;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod model;
pub mod occlusion;
pub mod params;
pub mod preprocess;
pub mod stgcn;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{GraphDef, SkeletonGraph};
pub use model::{Classifier, RaGcnModel};
pub use preprocess::SkeletonSequence;
pub use stgcn::{StgcnConfig, StgcnNetwork};
pub use tensor::Tensor;
