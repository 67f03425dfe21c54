//! Small synthetic laboratory: a toy decoder-only transformer, three
//! synthetic tasks standing in for text, image and video inputs, and the
//! training and evaluation loops around them.

pub mod analysis;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod tasks;
pub mod train;

pub use config::{ToyConfig, TrainConfig};
pub use error::{LabError, Result};
pub use model::{architecture_spec, tensor_layout, Params, TensorClass, ToyModel};
pub use tasks::{MixtureSchedule, Sample, TaskId, TaskSampler};
pub use eval::{accuracy_on, choice_records, eval_samples, evaluate, masked_records};
pub use train::{finetune_sweep, train, train_with_checkpoints, Trainer, TrajectoryEntry, TrajectoryLog};
pub use analysis::{delta_direction_analysis, direction_report, flattened_delta, DirectionReport};
