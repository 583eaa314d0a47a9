//! Optimisation, metrics, the training loop and the ablation grid.

mod ablation;
mod metrics;
mod optim;
mod trainer;

pub use ablation::{mean_std, run_ablation, AblationRow, AblationTable};
pub use metrics::{ConfusionMatrix, MetricsReport};
pub use optim::{adamw_update, poly_lr, AdamW, AdamWConfig, Moments};
pub use trainer::{
    evaluate, majority_pixel_acc, train, train_with_schedule, write_report, LossRecord,
    TrainConfig, TrainLog, TrainOutputs, FINAL_CHECKPOINT, LAST_GOOD_CHECKPOINT, LOSS_CSV,
};
