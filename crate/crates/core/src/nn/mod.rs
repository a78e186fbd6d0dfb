//! Small trainable neural stack: dense, convolution, pooling and LSTM layers
//! with analytic gradients, Adam, and a checkpoint format.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod lstm;
pub mod network;
pub mod ops;
pub mod tensor;
pub mod train;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint_header, Checkpoint, CheckpointHeader};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use lstm::{lstm_cell, LstmParams};
pub use network::{batch_loss, Batch, Layer, LossKind, Network, NetworkSpec, ParamBlock, Targets};
pub use tensor::Tensor;
pub use train::{lr_schedule, mean_loss, predict_all, train, LossCurve, Samples, TrainSpec};

/// LSTM hidden size and mask-embedding width used by the sequence models.
pub const DEFAULT_HIDDEN: usize = 64;
