//! Pretraining, optimization, checkpoints and downstream evaluation.

mod checkpoint;
mod data;
mod gradcheck;
mod optim;
mod pretrain;
mod probe;

pub use checkpoint::{
    load_checkpoint, read_checkpoint_config, save_checkpoint, Checkpoint, RngState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use data::{is_held_out, Dataset, PreparedVideo};
pub use gradcheck::check_pretrain_gradients;
pub use optim::{adamw_step, lr_at, AdamWConfig, OptimizerState};
pub use pretrain::{metrics_csv, sample_layout, MetricRow, Trainer, METRICS_HEADER};
pub use probe::{probe, ProbeMode, ProbeReport};
