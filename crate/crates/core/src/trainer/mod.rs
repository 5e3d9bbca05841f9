//! Optimization, evaluation, the variant ablation and the gradient suite.

mod ablation;
mod adam;
mod data;
mod eval;
mod gradsuite;
mod train;

pub use ablation::{ablation_run, AblationConfig, AblationReport, AblationRow};
pub use adam::{adam_step, AdamState, DecayMode, ADAM_EPS, BETA1, BETA2};
pub use data::{encode_normals, make_batch, normalize_depth, resize_sample, Batch, SampleSet};
pub use eval::{evaluate, evaluate_checkpoint, EvalOptions, EvalReport, ImageMetrics};
pub use gradsuite::{gradient_suite, model_check, tiny_config, SuiteEntry, SuiteOptions};
pub use train::{
    epoch_order, train, train_observed, Control, StepLog, TrainConfig, TrainOutcome, FINAL_CHECKPOINT, STEP_LOG,
};
