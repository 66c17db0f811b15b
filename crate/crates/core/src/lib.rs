//! Sparse CNN training laboratory.
//!
//! The crate trains small CNNs with stochastic pruning of activation
//! gradients, lowers every CONV layer of a training step into 1-D row
//! convolutions (SRC / MSRC / OSRC), and runs those instruction streams on
//! an event-counting model of a PE-group accelerator to compare sparse
//! execution against a dense baseline of the same machine.
//!
//! Module map:
//!
//! * [`tensor`], [`reference`], [`rng`] - containers, the compressed row
//!   format, oracle convolutions and the reproducible random stream.
//! * [`nn`] - the training engine (Forward, GTA, GTW, SGD) with ReLU and
//!   MaxPool masks and batch normalization.
//! * [`prune`] - stochastic pruning with threshold determination and FIFO
//!   threshold prediction.
//! * [`dataflow`] - lowering of CONV layers into row instructions and their
//!   scheduling over PE groups.
//! * [`sim`] - the cycle and energy model, sparse and dense modes.
//! * [`trace`] - capture of per-sample training steps for the simulator.

pub mod dataflow;
pub mod error;
pub mod nn;
pub mod normal;
pub mod par;
pub mod prune;
pub mod reference;
pub mod rng;
pub mod sim;
pub mod tensor;
pub mod trace;

pub use error::{Error, Result};
pub use par::Exec;
pub use rng::Rng;
pub use tensor::{BitMask, Kernel4, SparseRow, Tensor3};
