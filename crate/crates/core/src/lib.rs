//! Weight-space tooling for fine-tuned checkpoints: streaming archive I/O,
//! parameter-shift analysis, average and shift-weighted merging, single-head
//! ablation and multiple-choice salience metrics.

pub mod delta;
pub mod dtype;
pub mod error;
pub mod merge;
pub mod metrics;
pub mod numeric;
pub mod surgery;
pub mod tensor_store;

pub use delta::{delta_ratio, model_delta_report, tensor_delta_avg, DeltaOptions, DeltaReport, RatioRow};
pub use dtype::DType;
pub use error::{Error, Result};
pub use merge::{
    average_merge, execute_plan, plan_merge, softmax_weights, weighted_merge, Disposition, Granularity,
    MergeInput, MergeMode, MergeOutcome, MergePlan, MergeRecipe, MergeWeights, NonsharedPolicy, OutputDType,
};
pub use metrics::{
    build_salience_grid, exact_accuracy, option_kl, probability_accuracy, ChoiceRecord, KlDirection, SalienceGrid,
};
pub use surgery::{enumerate_masks, mask_grid, mask_head, ArchitectureSpec, HeadMaskSpec, OutputLayout};
pub use tensor_store::{
    open_archive, read_tensor, validate_alignment, write_archive, AlignmentReport, ArchiveWriter, Metadata,
    Tensor, TensorArchive, TensorEntry, TensorMeta, TensorSpec, WriteOptions,
};
