//! Fixed-depth offline training, test-time adaptation and evaluation.

mod config;
mod eval;
mod offline;
pub mod optim;
mod ttt;

pub use config::{TrainConfig, TttConfig};
pub use eval::{evaluate, pixel_accuracy, EvalReport, EvalTask, QueryResult, EVAL_SCHEMA_VERSION};
pub use offline::{
    accumulate_batch, forward_logits, offline_loss, offline_loss_value, train_offline, BatchStats, MetricsRecord,
    TrainData, TrainReport, METRICS_SCHEMA_VERSION,
};
pub use ttt::{batch_loss, ttt_adapt, ttt_batch};

#[cfg(test)]
mod tests;
