//! Core library of `esmlab`, a desk-scale laboratory for score
//! distillation with exact diffusion inversion.
//!
//! The pieces, bottom to top:
//!
//! * [`tensor`], [`rng`], [`store`], [`tape`], [`optim`], [`gradcheck`] —
//!   minimal numeric substrate: dense tensors, seeded randomness, named
//!   parameters, reverse-mode differentiation, Adam, and the
//!   finite-difference checker every hand-written gradient answers to.
//! * [`schedule`], [`dataset`], [`denoiser`], [`checkpoint`], [`lora`] —
//!   the diffusion side: noise schedule and DDIM transition maps, toy image
//!   classes, a from-scratch conditional noise predictor (plus a closed-form
//!   Gaussian-data predictor for exactness tests), checkpoints, and low-rank
//!   adapters.
//! * [`inversion`] — plain multi-step DDIM inversion and the coupled
//!   scheme that makes the round trip exact to machine precision.
//! * [`splat`] — a differentiable 2D Gaussian-splat rasterizer with a
//!   hand-derived backward pass; the scene is what distillation optimizes.
//! * [`distill`] — the SDS / ISM / ESM distillation gradients, their error
//!   decomposition, and the full optimization loop.
//! * [`verify`] — the runnable invariant suite tying it all together.

pub mod checkpoint;
pub mod dataset;
pub mod denoiser;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod inversion;
pub mod lora;
pub mod optim;
pub mod rng;
pub mod schedule;
pub mod splat;
pub mod store;
pub mod tape;
pub mod tensor;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
