//! A small CPU convolutional network engine: tensors, layers with hand-written
//! backward passes, the three classifier architectures, optimisers, learning
//! rate schedules, an early-stopping training loop and checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod model;
pub mod optim;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod train;

pub use model::{build_model, Arch, ModelConfig, Network};
pub use optim::{OptimizerKind, OptimizerSpec};
pub use schedule::{ScheduleKind, ScheduleSpec};
pub use tensor::{NnError, Tensor};
pub use train::{Dataset, TrainConfig, TrainState};
