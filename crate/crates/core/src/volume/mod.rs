//! CT volumes: the voxel container, resolution profiles, intensity and
//! spatial preprocessing, and the `.ctvol` file format.
//!
//! Axis convention: x is sagittal, y coronal, z transverse. Voxels are stored
//! x-fastest, then y, then z. No augmentation (flip/rotate) is offered.

mod io;
mod ops;

pub use io::{read_ctvol, read_raw_with_descriptor, write_ctvol, RawDescriptor, CTVOL_MAGIC};
pub use ops::{
    clip_hu, normalize_intensity, preprocess, resample_spacing, resize, HU_MAX, HU_MIN,
    TARGET_SPACING_MM,
};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("dims must be positive, got {0:?}")]
    ZeroDim([usize; 3]),
    #[error("voxel count {got} does not match dims {dims:?} ({expected} expected)")]
    LengthMismatch {
        dims: [usize; 3],
        expected: usize,
        got: usize,
    },
    #[error("spacing must be finite and strictly positive, got {0:?}")]
    BadSpacing([f64; 3]),
    #[error("non-finite voxel value at index {index}")]
    NonFinite { index: usize },
    #[error("invalid intensity window: lo {lo} must be below hi {hi}")]
    BadWindow { lo: f32, hi: f32 },
    #[error("voxel {index} has value {value} outside [{lo}, {hi}]; clip before normalizing")]
    OutOfWindow {
        index: usize,
        value: f32,
        lo: f32,
        hi: f32,
    },
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<VolumeError>,
    },
    #[error("bad magic: not a .ctvol file")]
    BadMagic,
    #[error("truncated file: {0}")]
    Truncated(&'static str),
    #[error("payload mismatch: header dims {dims:?} require {expected} voxels, payload holds {got_bytes} bytes")]
    PayloadMismatch {
        dims: [usize; 3],
        expected: usize,
        got_bytes: usize,
    },
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("descriptor: {0}")]
    Descriptor(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

/// A 3D scalar field with physical voxel spacing in millimetres.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    spacing: [f64; 3],
    voxels: Vec<f32>,
}

impl Volume {
    /// Builds a volume, checking dims, spacing and that every voxel is finite.
    pub fn new(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<f32>) -> Result<Self> {
        let v = Self::new_unchecked_values(dims, spacing, voxels)?;
        if let Some(index) = v.voxels.iter().position(|x| !x.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(v)
    }

    /// Like [`Volume::new`] but leaves the voxel-finiteness check to the
    /// caller; used where the first pipeline stage reports the offending index.
    pub(crate) fn new_unchecked_values(
        dims: [usize; 3],
        spacing: [f64; 3],
        voxels: Vec<f32>,
    ) -> Result<Self> {
        if dims.contains(&0) {
            return Err(VolumeError::ZeroDim(dims));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(VolumeError::BadSpacing(spacing));
        }
        let expected = dims[0] * dims[1] * dims[2];
        if voxels.len() != expected {
            return Err(VolumeError::LengthMismatch {
                dims,
                expected,
                got: voxels.len(),
            });
        }
        Ok(Self {
            dims,
            spacing,
            voxels,
        })
    }

    pub fn filled(dims: [usize; 3], spacing: [f64; 3], value: f32) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, spacing, vec![value; n])
    }

    /// Samples `f(x, y, z)` at integer voxel indices.
    pub fn from_fn(
        dims: [usize; 3],
        spacing: [f64; 3],
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self> {
        let mut voxels = Vec::with_capacity(dims.iter().product());
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    voxels.push(f(x, y, z));
                }
            }
        }
        Self::new(dims, spacing, voxels)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.voxels[self.index(x, y, z)]
    }

    /// Physical extent along each axis, `dims_i * spacing_i`.
    pub fn extent(&self) -> [f64; 3] {
        [
            self.dims[0] as f64 * self.spacing[0],
            self.dims[1] as f64 * self.spacing[1],
            self.dims[2] as f64 * self.spacing[2],
        ]
    }

    /// Replaces the voxel values, keeping geometry. Values are re-validated.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<Self> {
        Self::new(
            self.dims,
            self.spacing,
            self.voxels.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// The two input resolutions used for the vision encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResolutionProfile {
    Normal,
    High,
}

impl ResolutionProfile {
    pub const ALL: [ResolutionProfile; 2] = [ResolutionProfile::Normal, ResolutionProfile::High];

    pub fn target_dims(self) -> [usize; 3] {
        match self {
            ResolutionProfile::Normal => [256, 256, 64],
            ResolutionProfile::High => [512, 512, 256],
        }
    }

    pub fn patch_dims(self) -> [usize; 3] {
        match self {
            ResolutionProfile::Normal => [16, 16, 8],
            ResolutionProfile::High => [32, 32, 16],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ResolutionProfile::Normal => "normal",
            ResolutionProfile::High => "high",
        }
    }
}

impl fmt::Display for ResolutionProfile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResolutionProfile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(ResolutionProfile::Normal),
            "high" => Ok(ResolutionProfile::High),
            other => Err(format!(
                "unknown profile {other:?}; expected one of: normal, high"
            )),
        }
    }
}
