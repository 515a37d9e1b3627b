//! Sparse mixture-of-experts language models on a small reverse-mode
//! autodiff engine, with interchangeable routing gates (learned linear,
//! self-routing from a hidden-state slice, frozen random projection and
//! per-pass random logits), routing telemetry and a training harness.
//!
//! Everything numeric is generic over [`Scalar`]; the root aliases fix it
//! to `f32`, with `*64` variants for high-precision checks.

pub mod autodiff;
pub mod backbone;
pub mod config;
pub mod error;
pub mod gates;
pub mod moe;
pub mod run;
pub mod scalar;
pub mod telemetry;
pub mod train;

pub use autodiff::{grad_check, grad_check_params, ParamId, Var};
pub use backbone::{ModelConfig, MoePlacement, ParamCounts};
pub use config::RunConfig;
pub use error::{Error, Result};
pub use gates::{balance_loss, router_param_count, BalanceInputs, GateKind, GateSpec};
pub use moe::{dispatch_plan, moe_forward, route, DispatchPlan, ExpertFfn, RoutingDecision};
pub use scalar::Scalar;
pub use telemetry::{max_expert_fraction, normalized_entropy, ExpertUsageStats};
pub use train::TrainConfig;

pub type Tensor = autodiff::Tensor<f32>;
pub type Tape = autodiff::Tape<f32>;
pub type ParamStore = autodiff::ParamStore<f32>;
pub type Model = backbone::Model<f32>;
pub type Trainer = train::Trainer<f32>;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type ParamStore64 = autodiff::ParamStore<f64>;
pub type Model64 = backbone::Model<f64>;
pub type Trainer64 = train::Trainer<f64>;
