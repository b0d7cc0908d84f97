//! Pretraining: configuration, schedules, optimizer, step and run loop.

mod checkpoint;
mod config;
mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};
pub use config::{Config, TrainMode};
pub use metrics::{
    epoch_summaries, metrics_csv, parse_metrics, read_metrics, EpochSummary, MetricRow,
    METRICS_HEADER,
};
pub use optim::Sgd;
pub use schedule::lr_schedule;
pub use trainer::{
    batch_for_step, epoch_checkpoint_name, label_map, run_pretraining, BatchGradients,
    KeyEmbeddings, LabelOracle, NoLabels, RunSummary, StepReport, TrainState, FINAL_CHECKPOINT,
    METRICS_FILE,
};
