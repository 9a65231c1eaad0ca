//! Simulator for communication-aware federated distillation with LoRA
//! adapters, channel-budgeted Top-k logit uplinks and sparsity-aware
//! aggregation.

pub mod aggregation;
pub mod channel;
pub mod data;
pub mod distill;
pub mod error;
pub mod federation;
pub mod lora;
pub mod model;
pub mod oracle;
pub mod rng;
pub mod telemetry;
pub mod tensor;
pub mod wire;

pub use error::{Error, Result};
