//! Minimal differentiable tensor engine, random streams and optimizers.

pub mod layers;
pub mod optim;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use layers::{timestep_embedding, Bound, Conv, Linear, ParamId, ParamStore, ResBlock};
pub use optim::{Adan, AdamW, Optimizer, OptimizerKind};
pub use rng::{sample_gaussian, RngStream};
pub use tape::{grad_eval, Conv2dOpts, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};
