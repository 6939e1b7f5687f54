//! Two-stage training: ranking towers first, then the basis memory with the
//! towers frozen. Checkpoints and the contrastive losses live here too.

mod checkpoint;
mod config;
mod loss;
mod stages;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ConfigSnapshot, EpochRecord, CHECKPOINT_VERSION,
};
pub use config::TrainConfig;
pub use loss::{contrastive_loss_graph, ranking_loss, recall_loss};
pub use stages::{
    ranking_sample_loss, recall_sample_loss, train_stage1, train_stage1_named, train_stage2,
    with_workers,
};
