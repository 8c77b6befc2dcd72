//! Histogram-based parameter-efficient tuning for a frozen transformer
//! encoder, with adapter, LoRA, SSF, linear-probe and full fine-tuning
//! baselines. Everything runs in f64 on the CPU.

pub mod analysis;
pub mod autograd;
pub mod cli;
pub mod config;
pub mod error;
pub mod histogram;
pub mod model;
pub mod nn;
pub mod param;
pub mod petl;
pub mod tensor;
pub mod train;
pub mod verify;

pub use autograd::{grad_check, Graph, Var};
pub use error::{Error, Result};
pub use param::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
