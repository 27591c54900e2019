use super::{GeometryError, Result};
use crate::volume::Volume;
use num_traits::Float;
use std::fs;
use std::path::Path;

pub const TKG_MAGIC: &[u8; 4] = b"TKG1";

/// A `gx * gy * gz` lattice of `d`-dimensional tokens, x-fastest, token-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T = f32> {
    grid_dims: [usize; 3],
    token_dim: usize,
    data: Vec<T>,
}

impl<T: Float> TokenGrid<T> {
    pub fn new(grid_dims: [usize; 3], token_dim: usize, data: Vec<T>) -> Result<Self> {
        if token_dim == 0 || grid_dims.contains(&0) {
            return Err(GeometryError::ZeroDim {
                dims: grid_dims,
                d: token_dim,
            });
        }
        let expected = grid_dims.iter().product::<usize>() * token_dim;
        if data.len() != expected {
            return Err(GeometryError::LengthMismatch {
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self {
            grid_dims,
            token_dim,
            data,
        })
    }

    pub fn grid_dims(&self) -> [usize; 3] {
        self.grid_dims
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_dims.iter().product()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn token_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.grid_dims[0] * (y + self.grid_dims[1] * z)
    }

    pub fn token(&self, i: usize) -> &[T] {
        &self.data[i * self.token_dim..(i + 1) * self.token_dim]
    }

    /// Grid coordinates of token `i`.
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [gx, gy, _] = self.grid_dims;
        [i % gx, (i / gx) % gy, i / (gx * gy)]
    }

    fn halved_dims(&self) -> Result<[usize; 3]> {
        let mut out = [0; 3];
        for (axis, &dim) in self.grid_dims.iter().enumerate() {
            if dim % 2 != 0 {
                return Err(GeometryError::OddGridDim { axis, dim });
            }
            out[axis] = dim / 2;
        }
        Ok(out)
    }
}

pub fn patchify(v: &Volume, patch: [usize; 3]) -> Result<TokenGrid<f32>> {
    let dims = v.dims();
    let mut grid = [0; 3];
    for axis in 0..3 {
        if patch[axis] == 0 || !dims[axis].is_multiple_of(patch[axis]) {
            return Err(GeometryError::NotDivisible {
                axis,
                dim: dims[axis],
                patch: patch[axis],
            });
        }
        grid[axis] = dims[axis] / patch[axis];
    }
    let [px, py, pz] = patch;
    let token_dim = px * py * pz;
    let mut data = Vec::with_capacity(v.len());
    for gz in 0..grid[2] {
        for gy in 0..grid[1] {
            for gx in 0..grid[0] {
                for z in 0..pz {
                    for y in 0..py {
                        let start = v.index(gx * px, gy * py + y, gz * pz + z);
                        data.extend_from_slice(&v.voxels()[start..start + px]);
                    }
                }
            }
        }
    }
    TokenGrid::new(grid, token_dim, data)
}

/// Inverse of [`patchify`]; `spacing` is attached to the rebuilt volume.
pub fn unpatchify(g: &TokenGrid<f32>, patch: [usize; 3], spacing: [f64; 3]) -> Result<Volume> {
    let [px, py, pz] = patch;
    let expected = px * py * pz;
    if g.token_dim() != expected {
        return Err(GeometryError::TokenDimMismatch {
            token_dim: g.token_dim(),
            expected,
        });
    }
    let grid = g.grid_dims();
    let dims = [grid[0] * px, grid[1] * py, grid[2] * pz];
    let mut voxels = vec![0f32; g.data().len()];
    let mut src = g.data().iter();
    for gz in 0..grid[2] {
        for gy in 0..grid[1] {
            for gx in 0..grid[0] {
                for z in 0..pz {
                    for y in 0..py {
                        let start = gx * px + dims[0] * (gy * py + y + dims[1] * (gz * pz + z));
                        for dst in &mut voxels[start..start + px] {
                            *dst = *src.next().unwrap();
                        }
                    }
                }
            }
        }
    }
    Ok(Volume::new(dims, spacing, voxels)?)
}

/// Halves each grid axis and concatenates the 8 source tokens of each 2x2x2
/// block. Block offset `o = dz*4 + dy*2 + dx` occupies channels
/// `[o*d, (o+1)*d)` of the output token.
pub fn pixel_shuffle_3d<T: Float>(g: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    let out_dims = g.halved_dims()?;
    let d = g.token_dim();
    let mut data = Vec::with_capacity(g.data().len());
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                for o in 0..8 {
                    let (dx, dy, dz) = (o & 1, (o >> 1) & 1, o >> 2);
                    let src = g.token_index(2 * x + dx, 2 * y + dy, 2 * z + dz);
                    data.extend_from_slice(g.token(src));
                }
            }
        }
    }
    TokenGrid::new(out_dims, 8 * d, data)
}

pub fn pixel_unshuffle_3d<T: Float>(g: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    if !g.token_dim().is_multiple_of(8) {
        return Err(GeometryError::TokenDimNotDivisibleBy8(g.token_dim()));
    }
    let d = g.token_dim() / 8;
    let [gx, gy, gz] = g.grid_dims();
    let out_dims = [2 * gx, 2 * gy, 2 * gz];
    let mut data = vec![T::zero(); g.data().len()];
    for i in 0..g.n_tokens() {
        let [x, y, z] = g.coords(i);
        let tok = g.token(i);
        for o in 0..8 {
            let (dx, dy, dz) = (o & 1, (o >> 1) & 1, o >> 2);
            let dst = (2 * x + dx) + out_dims[0] * ((2 * y + dy) + out_dims[1] * (2 * z + dz));
            data[dst * d..(dst + 1) * d].copy_from_slice(&tok[o * d..(o + 1) * d]);
        }
    }
    TokenGrid::new(out_dims, d, data)
}

/// 2x2x2 mean pooling of tokens; token dim unchanged. Accumulates in f64.
pub fn avg_pool_3d<T: Float>(g: &TokenGrid<T>) -> Result<TokenGrid<T>> {
    let out_dims = g.halved_dims()?;
    let d = g.token_dim();
    let mut data = Vec::with_capacity(g.data().len() / 8);
    let mut acc = vec![0f64; d];
    for z in 0..out_dims[2] {
        for y in 0..out_dims[1] {
            for x in 0..out_dims[0] {
                acc.iter_mut().for_each(|a| *a = 0.0);
                for o in 0..8 {
                    let (dx, dy, dz) = (o & 1, (o >> 1) & 1, o >> 2);
                    let src = g.token_index(2 * x + dx, 2 * y + dy, 2 * z + dz);
                    for (a, v) in acc.iter_mut().zip(g.token(src)) {
                        *a += v.to_f64().unwrap();
                    }
                }
                data.extend(acc.iter().map(|a| T::from(a / 8.0).unwrap()));
            }
        }
    }
    TokenGrid::new(out_dims, d, data)
}

pub fn write_tkg(g: &TokenGrid<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(20 + g.data().len() * 4);
    buf.extend_from_slice(TKG_MAGIC);
    for v in g.grid_dims().into_iter().chain([g.token_dim()]) {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for x in g.data() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_tkg(path: impl AsRef<Path>) -> Result<TokenGrid<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() < 4 || &bytes[..4] != TKG_MAGIC {
        return Err(GeometryError::BadMagic);
    }
    if bytes.len() < 20 || (bytes.len() - 20) % 4 != 0 {
        return Err(GeometryError::Truncated);
    }
    let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    TokenGrid::new([u(4), u(8), u(12)], u(16), data)
}
