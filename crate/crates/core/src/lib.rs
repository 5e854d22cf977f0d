//! Windowed multi-view adaptive-selection (MVAS) attention and a
//! teacher/student multi-view anomaly-detection pipeline built on it.
//!
//! Layers, bottom up:
//! - [`tensor`], [`autograd`], [`optim`], [`gradcheck`], [`mvt`]: a small
//!   dense tensor core with reverse-mode differentiation.
//! - [`mvas`]: window partitioning, top-K window selection, neighbourhood
//!   cross-attention, the MVAS block and its FLOP model.
//! - [`pipeline`]: frozen teacher, MVAS stages, FPN fusion, student decoder,
//!   training and evaluation.
//! - [`metrics`]: AUROC, AP, F1-max and PRO.
//! - [`synthdata`]: deterministic synthetic multi-view dataset.
//! - [`bench`]: FLOP and wall-time sweeps, ablation grids.

pub mod autograd;
pub mod bench;
pub mod error;
pub mod gradcheck;
pub(crate) mod kernels;
pub mod metrics;
pub mod mvas;
pub mod mvt;
pub mod optim;
pub mod pipeline;
pub mod scalar;
pub mod synthdata;
pub mod tensor;

pub use autograd::{Tape, Var};
pub use error::{Error, Result};
pub use optim::{AdamW, Parameter};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;
