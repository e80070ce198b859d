//! Loss composition, AdamW training, checkpoints and run logs.

mod checkpoint;
mod loss;
mod optim;
mod train;
mod visual;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, load_checkpoint_for, save_checkpoint, FORMAT_VERSION, MAGIC,
};
pub use loss::{
    masked_reconstruction_loss, reconstruction_loss, sample_mask_seed, total_loss, total_loss_grad, LossBreakdown,
    LossConfig, LossToggles, LossWeights, Reconstruction,
};
pub use optim::{adamw_update, clip_grad_norm, learning_rate, AdamState, OptimConfig};
pub use train::{
    metrics_line, pretrain, train_step, PretrainOptions, PretrainSummary, StepReport, TrainConfig, TrainState,
    LAST_CHECKPOINT, METRICS_HEADER, METRICS_LOG,
};

pub use visual::{reconstruct, ReconstructionPanels};
