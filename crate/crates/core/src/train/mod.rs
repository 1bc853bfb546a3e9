//! AdamW, the training loop, evaluation and classification metrics.

mod metrics;
mod optim;
mod trainer;

pub use metrics::{accuracy, argmax, confusion_matrix, f1_score, roc_auc, ClassMetrics, F1Kind, MetricsReport};
pub use optim::AdamW;
pub use trainer::{
    epoch_order, evaluate, make_batch, predict_proba, train_epoch, train_model, LogisticBaseline, TrainConfig,
};
