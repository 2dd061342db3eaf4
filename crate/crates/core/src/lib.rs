pub mod autograd;
pub mod error;
pub mod gradcheck;
pub mod model;
pub mod moe;
pub mod plan;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod upcycle;

pub use autograd::{AttentionGeometry, Tape, Var};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use model::{DenseCheckpoint, MoECheckpoint, ModelConfig, ModelRef, TensorMap};
pub use moe::{CapacityFactor, GateConfig, MoeSpec, RouterType};
pub use plan::ParallelPlan;
pub use rng::Rng;
pub use tensor::{keep_top_k, matmul, softmax, softplus, Masked, Tensor};
pub use train::{RunMetrics, Schedule, TrainConfig};
