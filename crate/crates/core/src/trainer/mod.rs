//! Optimizers, bi-level search, retraining and checkpoints.

mod adam;
mod batch;
mod checkpoint;
mod metrics;
mod retrain;
mod search;

pub use adam::{Adam, AdamConfig};
pub use batch::{assemble, batches, split_indices, stream_rng};
pub use checkpoint::{
    Checkpoint, CheckpointManifest, MomentEntry, OptimizerEntry, ParamEntry, PlanEdge, PlanNode, CHECKPOINT_FORMAT,
};
pub use metrics::{read_metrics_csv, write_metrics_csv, EpochSummary, MetricsRow};
pub use retrain::{check_connected, evaluate, predict, retrain_derived, TrainConfig, Trainer};
pub use search::{BiLevelConfig, Searcher};
