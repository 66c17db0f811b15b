//! CNN training engine: Forward, GTA, GTW and SGD, with the ReLU / MaxPool
//! masks recorded in the forward pass and optional batch normalization.

pub mod batchnorm;
pub mod data;
pub mod network;
pub mod spec;
pub mod train;

pub use batchnorm::{batchnorm_backward, batchnorm_forward};
pub use data::Dataset;
pub use network::{
    softmax_cross_entropy, BackwardOutput, ConvBackward, ForwardContext, Gradients, LayerParams,
    Network, PruneJob,
};
pub use spec::{ConvGeometry, LayerSpec, NetworkSpec, PruneStructure};
pub use train::{EpochReport, LayerEpochStats, StepResult, Trainer};
