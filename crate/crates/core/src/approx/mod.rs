//! Differentiable function-approximation substrate: feedforward networks,
//! reverse-mode gradients, adaptive-moment optimization and checkpoints.

mod adam;
mod checkpoint;
pub mod gradcheck;
mod matrix;
mod network;

pub use adam::{clip_global_norm, optimizer_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    decode_network_checkpoint, encode_network_checkpoint, Checkpoint, MAGIC, VERSION,
};
pub use matrix::Matrix;
pub use network::{
    check_finite, log_softmax_at, softmax, Activation, Gradients, Network, OutputLoss, ParamBlock,
    SoftmaxCrossEntropy, SquaredError, Tape,
};

#[derive(Debug, thiserror::Error)]
pub enum ApproxError {
    #[error("input dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("non-finite value in {block}")]
    NumericFailure { block: String },
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("i/o: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, ApproxError>;

/// Anything whose trainable state is a list of parameter blocks.
pub trait Parameterized {
    fn param_blocks(&self) -> Vec<&ParamBlock>;
    fn param_blocks_mut(&mut self) -> Vec<&mut ParamBlock>;
}

impl Parameterized for Network {
    fn param_blocks(&self) -> Vec<&ParamBlock> {
        self.blocks().iter().collect()
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.blocks_mut().iter_mut().collect()
    }
}
