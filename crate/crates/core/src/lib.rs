//! Instance- and task-aware dynamic convolution for few-shot learning.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`ops`], [`batchnorm`], [`autograd`], [`gradcheck`]: a small
//!   `f64` tensor engine with analytic backward passes.
//! * [`msa`]: DCT-based channel descriptors.
//! * [`generator`]: the shared dynamic kernel generator.
//! * [`insta`]: instance/task kernels, kernel fusion and dynamic convolution.
//! * [`fsl`]: synthetic episodes, backbone, ProtoNet head, training,
//!   evaluation and the ablation matrix.
//! * [`config`], [`checkpoint`], [`cli`]: the command-line front end.

pub mod autograd;
pub mod batchnorm;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fsl;
pub mod generator;
pub mod gradcheck;
pub mod gradsuite;
pub mod insta;
pub mod msa;
pub mod ops;
pub mod tensor;

pub use autograd::{Graph, Var};
pub use batchnorm::{BNState, BnMode};
pub use error::{Error, Result};
pub use tensor::Tensor;
