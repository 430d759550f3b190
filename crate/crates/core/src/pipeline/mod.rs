//! Data generation, the training step and loop, and checkpointing.

pub mod checkpoint;
pub mod data;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, ParamRecord, TrainState, FORMAT_VERSION};
pub use data::{generate_synthetic_pairs, held_out_pairs, PairedDataset, PairedItem, SyntheticPairConfig};
pub use train::{
    assemble_batch, build_loss, checkpoint_path, train_run, train_step, Batch, LossNodes, ModalityBatch,
    RunOptions, Samplers, StepRecord, TrainConfig, Trainer,
};
