//! Supervised training and evaluation.

pub mod loss;
pub mod metrics;
pub mod trainer;

pub use loss::{class_weights_from_split, classification_loss};
pub use metrics::{auc, bootstrap, compute_metrics, EvaluationReport, Interval, Metrics};
pub use trainer::{case_predictions, predict, train_hgnn, EpochRecord, TrainConfig, TrainOutcome};
