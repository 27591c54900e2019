//! `.ctvol` layout (little-endian):
//!
//! ```text
//! "CTV1" | u32 nx | u32 ny | u32 nz | f64 sx | f64 sy | f64 sz | u8 dtype (0 = f32) | f32 * nx*ny*nz
//! ```

use super::{Result, Volume, VolumeError};
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::Path;

pub const CTVOL_MAGIC: &[u8; 4] = b"CTV1";
const DTYPE_F32: u8 = 0;
const HEADER_LEN: usize = 4 + 3 * 4 + 3 * 8 + 1;

pub fn write_ctvol(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::with_capacity(HEADER_LEN + v.len() * 4);
    buf.extend_from_slice(CTVOL_MAGIC);
    for d in v.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for s in v.spacing() {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    buf.push(DTYPE_F32);
    for x in v.voxels() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

/// Reads a `.ctvol` file. Voxel bits are preserved as stored; finiteness is
/// enforced later by [`super::clip_hu`], which reports the offending index.
pub fn read_ctvol(path: impl AsRef<Path>) -> Result<Volume> {
    decode_ctvol(&fs::read(path)?)
}

pub(crate) fn decode_ctvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < 4 || &bytes[..4] != CTVOL_MAGIC {
        return Err(VolumeError::BadMagic);
    }
    if bytes.len() < HEADER_LEN {
        return Err(VolumeError::Truncated("header"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    let dims = [u32_at(4), u32_at(8), u32_at(12)];
    let spacing = [f64_at(16), f64_at(24), f64_at(32)];
    let dtype = bytes[40];
    if dtype != DTYPE_F32 {
        return Err(VolumeError::UnsupportedDtype(dtype));
    }
    let payload = &bytes[HEADER_LEN..];
    if !payload.len().is_multiple_of(4) {
        return Err(VolumeError::Truncated("payload ends mid-voxel"));
    }
    let expected = dims[0] * dims[1] * dims[2];
    if payload.len() / 4 != expected {
        return Err(VolumeError::PayloadMismatch {
            dims,
            expected,
            got_bytes: payload.len(),
        });
    }
    let voxels = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new_unchecked_values(dims, spacing, voxels)
}

/// JSON descriptor accompanying a headerless little-endian f32 array.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDescriptor {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

pub fn read_raw_with_descriptor(
    raw: impl AsRef<Path>,
    descriptor: impl AsRef<Path>,
) -> Result<Volume> {
    let desc: RawDescriptor = serde_json::from_slice(&fs::read(descriptor)?)
        .map_err(|e| VolumeError::Descriptor(e.to_string()))?;
    let bytes = fs::read(raw)?;
    if bytes.len() % 4 != 0 {
        return Err(VolumeError::Truncated("payload ends mid-voxel"));
    }
    let expected = desc.dims.iter().product::<usize>();
    if bytes.len() / 4 != expected {
        return Err(VolumeError::PayloadMismatch {
            dims: desc.dims,
            expected,
            got_bytes: bytes.len(),
        });
    }
    let voxels = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Volume::new_unchecked_values(desc.dims, desc.spacing, voxels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(dims: [u32; 3]) -> Vec<u8> {
        let mut b = CTVOL_MAGIC.to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_le_bytes());
        }
        for s in [1.0f64, 1.0, 4.0] {
            b.extend_from_slice(&s.to_le_bytes());
        }
        b.push(0);
        b
    }

    #[test]
    fn empty_is_bad_magic() {
        assert!(matches!(decode_ctvol(&[]), Err(VolumeError::BadMagic)));
        assert!(matches!(decode_ctvol(b"NOPE1234"), Err(VolumeError::BadMagic)));
    }

    #[test]
    fn seven_voxels_for_eight_is_payload_mismatch() {
        let mut b = header([2, 2, 2]);
        b.extend(std::iter::repeat_n(0u8, 7 * 4));
        let err = decode_ctvol(&b).unwrap_err();
        assert!(matches!(err, VolumeError::PayloadMismatch { expected: 8, .. }));
        assert!(err.to_string().contains("payload mismatch"));
    }

    #[test]
    fn truncated_header_and_partial_voxel() {
        assert!(matches!(
            decode_ctvol(&header([1, 1, 1])[..20]),
            Err(VolumeError::Truncated(_))
        ));
        let mut b = header([1, 1, 1]);
        b.extend_from_slice(&[0, 0, 0]);
        assert!(matches!(decode_ctvol(&b), Err(VolumeError::Truncated(_))));
    }

    #[test]
    fn unknown_dtype() {
        let mut b = header([1, 1, 1]);
        *b.last_mut().unwrap() = 3;
        b.extend_from_slice(&[0; 4]);
        assert!(matches!(
            decode_ctvol(&b),
            Err(VolumeError::UnsupportedDtype(3))
        ));
    }

    #[test]
    fn raw_fixture_with_descriptor() {
        let dir = tempfile::tempdir().unwrap();
        let raw = dir.path().join("v.raw");
        let desc = dir.path().join("v.json");
        let vals: Vec<f32> = (0..12).map(|i| i as f32 - 3.5).collect();
        fs::write(&raw, vals.iter().flat_map(|v| v.to_le_bytes()).collect::<Vec<_>>()).unwrap();
        fs::write(&desc, r#"{"dims":[3,2,2],"spacing":[0.5,0.5,2.0]}"#).unwrap();
        let v = read_raw_with_descriptor(&raw, &desc).unwrap();
        assert_eq!(v.dims(), [3, 2, 2]);
        assert_eq!(v.spacing(), [0.5, 0.5, 2.0]);
        assert_eq!(v.voxels(), &vals[..]);
    }
}
