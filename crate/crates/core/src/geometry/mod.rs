//! Token lattices: patchification, 3D sinusoidal positions, pixel shuffle,
//! average pooling, and random token masks.

mod grid;
mod mask;
mod pos;

pub use grid::{
    avg_pool_3d, patchify, pixel_shuffle_3d, pixel_unshuffle_3d, read_tkg, unpatchify, write_tkg,
    TokenGrid, TKG_MAGIC,
};
pub use mask::{sample_mask, MaskSet};
pub use pos::pos_embed_3d;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("axis {axis}: volume dim {dim} is not divisible by patch dim {patch}")]
    NotDivisible { axis: usize, dim: usize, patch: usize },
    #[error("axis {axis}: grid dim {dim} must be even")]
    OddGridDim { axis: usize, dim: usize },
    #[error("token dim {token_dim} does not match patch volume {expected}")]
    TokenDimMismatch { token_dim: usize, expected: usize },
    #[error("token dim {0} is not divisible by 8")]
    TokenDimNotDivisibleBy8(usize),
    #[error("embedding dim {0} must be a positive multiple of 6")]
    EmbedDim(usize),
    #[error("grid data length {got} does not match {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("grid dims and token dim must be positive, got {dims:?} x {d}")]
    ZeroDim { dims: [usize; 3], d: usize },
    #[error("non-finite grid entry at {0}")]
    NonFinite(usize),
    #[error("mask ratio {0} outside [0, 1]")]
    BadRatio(f64),
    #[error("bad magic: not a .tkg file")]
    BadMagic,
    #[error("truncated .tkg file")]
    Truncated,
    #[error(transparent)]
    Volume(#[from] crate::volume::VolumeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GeometryError> = std::result::Result<T, E>;
