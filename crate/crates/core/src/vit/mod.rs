//! A miniature 3D vision transformer with hand-written backward passes, the
//! masked-reconstruction and contrastive pretraining losses, the token
//! compressors and connector, and a staged AdamW trainer.

pub mod config;
pub mod connector;
pub mod gradcheck;
pub mod layers;
pub mod mat;
pub mod model;
pub mod params;
pub mod text;
pub mod train;

pub use config::{Compression, EncoderConfig, DEFAULT_QUERIES};
pub use connector::{align_loss, compress, connector_forward, perceiver_resample, AlignOutput};
pub use gradcheck::{grad_check, GradCheckReport};
pub use mat::Mat;
pub use model::{
    encode, encode_traced, flip_loss, info_nce, l2_normalize, mae_loss, mae_loss_masked,
    mae_loss_tokens, mae_loss_with_targets, sample_seed, tokens_from_grid,
    tokens_from_volume, FlipOutput, InfoNce, LossTrace, MaeOutput,
};
pub use params::{init_params, Grads, Param, ParameterSet};
pub use text::HashingEmbedder;
pub use train::{
    train, train_observed, write_history_csv, AdamW, HistoryRow, Objective, PlanKind, PretrainMethod, Stage, TrainPlan, TrainSample,
};

use crate::geometry::GeometryError;
use crate::volume::VolumeError;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite activation in {module} layer {layer}")]
    NonFinite { module: &'static str, layer: usize },
    #[error("trace mismatch: {0}")]
    TraceMismatch(String),
    #[error("zero-norm embedding ({0})")]
    ZeroNorm(String),
    #[error("batch: {0}")]
    BadBatch(String),
    #[error("mask ratio {0} must lie strictly between 0 and 1")]
    BadRatio(f64),
    #[error("mask leaves {visible} visible and {masked} masked tokens; both must be nonzero")]
    DegenerateMask { visible: usize, masked: usize },
    #[error("empty input sequence")]
    EmptyInput,
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("no tensor matches {0:?}")]
    UnknownTensor(String),
    #[error("loss is NaN at step {step}")]
    NanLoss { step: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
