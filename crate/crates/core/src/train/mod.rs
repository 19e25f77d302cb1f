//! Weighted loss, Adam, the cosine schedule, classification metrics and the
//! training loop.

mod loss;
mod metrics;
mod optim;
mod trainer;

pub use metrics::{ConfusionMatrix, MetricsReport};
pub use optim::{cosine_lr, Adam};
pub use trainer::{
    batch_tensor, evaluate, history_csv, read_history_csv, train, train_class_weights, EpochRecord, Evaluation,
    TrainConfig, TrainReport, HISTORY_HEADER,
};
