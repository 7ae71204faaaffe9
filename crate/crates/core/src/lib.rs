//! Continual learning with dual low-rank adapters on a miniature vision
//! transformer.
//!
//! The crate is organised bottom-up:
//! - [`linalg`]: dense matrices, Jacobi SVD, subspace bases and projectors
//! - [`vit`]: single-head pre-norm encoder with adapters and hand-written
//!   reverse-mode gradients
//! - [`dual_lora`]: feature-subspace memory, gradient projections and the
//!   dynamic-memory modulation of the residual adapter
//! - [`task_identity`]: task signatures, identity prediction and logit scaling
//! - [`trainer`]: the continual loop, ablation modes and ACC/FT metrics
//! - [`flops`]: analytical FLOPs model for ViT, LoRA, DualLoRA and prompt
//!   baselines
//! - [`data`], [`checkpoint`], [`config`]: fixtures, persistence, run configs

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod dual_lora;
pub mod error;
pub mod flops;
pub mod linalg;
pub mod rng;
pub mod task_identity;
pub mod trainer;
pub mod vit;

pub use error::{Error, Result};
pub use linalg::Mat;
