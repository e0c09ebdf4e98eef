//! U-Net multi-task cascades on a small CPU autodiff engine.
//!
//! The crate is layered bottom-up:
//!
//! - [`tensor`], [`graph`], [`rng`]: dense tensors, a static computation graph
//!   with reverse-mode gradients, and the seeded generator behind every draw.
//! - [`ops`], [`optim`], [`gradcheck`]: the layer vocabulary, Adam, and the
//!   finite-difference oracle that verifies every op.
//! - [`model`]: the UMC builder, skip routing and parameter accounting.
//! - [`data`], [`metrics`], [`train`], [`checkpoint`]: synthetic data,
//!   evaluation, the training loop and on-disk model state.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;
pub mod train;

pub use checkpoint::Checkpoint;
pub use data::{gen_synthetic, DataConfig, Dataset, NormStats, Sample};
pub use error::{Error, Result};
pub use graph::{Bindings, Graph, NodeId, Op};
pub use model::{build, count_params, Connectivity, ModelGraph, PathwaySpec, Task, UmcConfig, UpsampleMode};
pub use rng::Rng;
pub use tensor::{Scalar, Tensor};
pub use train::{evaluate, train, TaskBindings, TrainConfig};
