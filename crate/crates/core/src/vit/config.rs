use super::ModelError;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// How encoder output tokens are reduced before the connector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Compression {
    PixelShuffle,
    AvgPool,
    Perceiver,
}

impl Compression {
    pub const ALL: [Compression; 3] = [
        Compression::PixelShuffle,
        Compression::AvgPool,
        Compression::Perceiver,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Compression::PixelShuffle => "pixel_shuffle",
            Compression::AvgPool => "avg_pool",
            Compression::Perceiver => "perceiver",
        }
    }

    /// Number of tokens handed to the connector for `n_tokens` encoder tokens.
    pub fn compressed_count(self, n_tokens: usize, n_queries: usize) -> usize {
        match self {
            Compression::PixelShuffle | Compression::AvgPool => n_tokens / 8,
            Compression::Perceiver => n_queries,
        }
    }
}

impl fmt::Display for Compression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Compression {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Compression::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| {
                format!("unknown compression {s:?}; expected one of: pixel_shuffle, avg_pool, perceiver")
            })
    }
}

pub const DEFAULT_QUERIES: usize = 64;

fn default_queries() -> usize {
    DEFAULT_QUERIES
}

/// Geometry and widths of the micro encoder and its heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub patch_dims: [usize; 3],
    pub grid_dims: [usize; 3],
    /// Contrastive embedding width.
    pub d_joint: usize,
    /// Connector output width (the language model's embedding size).
    pub d_llm: usize,
    #[serde(default = "default_queries")]
    pub n_queries: usize,
    pub compression: Compression,
    pub connector_depth: usize,
}

impl EncoderConfig {
    /// 8x8x8 volume, 4x4x4 patches, two layers of width 24.
    pub fn micro() -> Self {
        Self {
            d_model: 24,
            n_layers: 2,
            n_heads: 2,
            mlp_ratio: 2,
            patch_dims: [4, 4, 4],
            grid_dims: [2, 2, 2],
            d_joint: 12,
            d_llm: 16,
            n_queries: DEFAULT_QUERIES,
            compression: Compression::PixelShuffle,
            connector_depth: 2,
        }
    }

    /// 16x16x8 volume, 4x4x2 patches: a 4x4x4 token grid.
    pub fn desk() -> Self {
        Self {
            patch_dims: [4, 4, 2],
            grid_dims: [4, 4, 4],
            d_joint: 16,
            d_llm: 32,
            ..Self::micro()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        let all_pos = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.mlp_ratio,
            self.d_joint,
            self.d_llm,
            self.n_queries,
        ]
        .iter()
        .chain(&self.patch_dims)
        .chain(&self.grid_dims)
        .all(|&v| v >= 1);
        if !all_pos {
            return bad(format!("all dims must be >= 1: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !self.d_model.is_multiple_of(6) {
            return bad(format!("d_model {} not divisible by 6", self.d_model));
        }
        if !(1..=2).contains(&self.connector_depth) {
            return bad(format!("connector depth {} not in {{1, 2}}", self.connector_depth));
        }
        if matches!(self.compression, Compression::PixelShuffle | Compression::AvgPool)
            && self.grid_dims.iter().any(|g| g % 2 != 0)
        {
            return bad(format!(
                "{} needs even grid dims, got {:?}",
                self.compression, self.grid_dims
            ));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        self.patch_dims.iter().product()
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_dims.iter().product()
    }

    pub fn volume_dims(&self) -> [usize; 3] {
        [
            self.grid_dims[0] * self.patch_dims[0],
            self.grid_dims[1] * self.patch_dims[1],
            self.grid_dims[2] * self.patch_dims[2],
        ]
    }

    pub fn mlp_hidden(&self) -> usize {
        self.mlp_ratio * self.d_model
    }

    pub fn connector_in(&self) -> usize {
        match self.compression {
            Compression::PixelShuffle => 8 * self.d_model,
            Compression::AvgPool | Compression::Perceiver => self.d_model,
        }
    }
}
