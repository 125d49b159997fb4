//! Configuration, checkpoints, training stages and end-to-end prediction.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod metrics;
pub mod plan;
pub mod predict;
pub mod profile;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::{ConfigFile, Section};
pub use metrics::{rwp, EvalReport, EvalRow};
pub use profile::{Arch, Profile, StageBudget};
