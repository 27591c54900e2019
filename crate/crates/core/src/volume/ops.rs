use super::{ResolutionProfile, Result, Volume, VolumeError};
use rayon::prelude::*;

pub const HU_MIN: f32 = -1000.0;
pub const HU_MAX: f32 = 1000.0;
/// Sagittal, coronal, transverse spacing after spatial normalization.
pub const TARGET_SPACING_MM: [f64; 3] = [1.0, 1.0, 4.0];

pub fn clip_hu(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(VolumeError::BadWindow { lo, hi });
    }
    if let Some(index) = v.voxels().iter().position(|x| !x.is_finite()) {
        return Err(VolumeError::NonFinite { index });
    }
    v.map(|x| x.clamp(lo, hi))
}

/// Maps `[lo, hi]` linearly onto `[0, 1]`. The input must already be clipped.
pub fn normalize_intensity(v: &Volume, lo: f32, hi: f32) -> Result<Volume> {
    if !(lo < hi) {
        return Err(VolumeError::BadWindow { lo, hi });
    }
    if let Some((index, &value)) = v
        .voxels()
        .iter()
        .enumerate()
        .find(|(_, x)| !(**x >= lo && **x <= hi))
    {
        return Err(VolumeError::OutOfWindow {
            index,
            value,
            lo,
            hi,
        });
    }
    let (lo, width) = (lo as f64, hi as f64 - lo as f64);
    v.map(|x| ((x as f64 - lo) / width) as f32)
}

/// Resamples to a new voxel spacing. New dims are
/// `round(dims_i * spacing_i / target_i)` (half away from zero, at least 1).
pub fn resample_spacing(v: &Volume, target: [f64; 3]) -> Result<Volume> {
    if target.iter().any(|&t| !(t.is_finite() && t > 0.0)) {
        return Err(VolumeError::BadSpacing(target));
    }
    let dims = v.dims();
    let spacing = v.spacing();
    let mut new_dims = [0usize; 3];
    let mut ratio = [0f64; 3];
    for i in 0..3 {
        let n = (dims[i] as f64 * spacing[i] / target[i]).round();
        new_dims[i] = if n < 1.0 {
            log::warn!(
                "axis {i}: resampling {} voxels at {} mm to {} mm collapses the axis; clamping to 1",
                dims[i],
                spacing[i],
                target[i]
            );
            1
        } else {
            n as usize
        };
        ratio[i] = target[i] / spacing[i];
    }
    Ok(trilinear(v, new_dims, ratio, target))
}

/// Trilinear resize to exactly `target` dims. Spacing is rescaled so that the
/// physical extent `dims_i * spacing_i` is unchanged.
pub fn resize(v: &Volume, target: [usize; 3]) -> Result<Volume> {
    if target.contains(&0) {
        return Err(VolumeError::ZeroDim(target));
    }
    let dims = v.dims();
    let extent = v.extent();
    let mut ratio = [0f64; 3];
    let mut spacing = [0f64; 3];
    for i in 0..3 {
        ratio[i] = dims[i] as f64 / target[i] as f64;
        spacing[i] = if dims[i] == target[i] {
            v.spacing()[i]
        } else {
            extent[i] / target[i] as f64
        };
    }
    Ok(trilinear(v, target, ratio, spacing))
}

/// clip -> normalize -> resample to 1x1x4 mm -> resize to the profile dims.
pub fn preprocess(v: &Volume, profile: ResolutionProfile) -> Result<Volume> {
    let tag = |stage: &'static str| {
        move |e: VolumeError| VolumeError::Stage {
            stage,
            source: Box::new(e),
        }
    };
    let clipped = clip_hu(v, HU_MIN, HU_MAX).map_err(tag("clip"))?;
    let normalized = normalize_intensity(&clipped, HU_MIN, HU_MAX).map_err(tag("normalize"))?;
    drop(clipped);
    let resampled = resample_spacing(&normalized, TARGET_SPACING_MM).map_err(tag("resample"))?;
    drop(normalized);
    let resized = resize(&resampled, profile.target_dims()).map_err(tag("resize"))?;
    // Convex combinations can overshoot [0, 1] by an ulp.
    resized.map(|x| x.clamp(0.0, 1.0)).map_err(tag("resize"))
}

#[derive(Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    w: f64,
}

/// Output voxel `j` samples input continuous index `(j + 0.5) * ratio - 0.5`,
/// i.e. voxel centres with the grid edges aligned, clamped to `[0, n - 1]`.
fn axis_taps(n_in: usize, n_out: usize, ratio: f64) -> Vec<Tap> {
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|j| {
            let c = ((j as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            let lo = c.floor() as usize;
            let w = c - lo as f64;
            let hi = if w > 0.0 { (lo + 1).min(n_in - 1) } else { lo };
            Tap { lo, hi, w }
        })
        .collect()
}

fn trilinear(v: &Volume, new_dims: [usize; 3], ratio: [f64; 3], new_spacing: [f64; 3]) -> Volume {
    let dims = v.dims();
    let tx = axis_taps(dims[0], new_dims[0], ratio[0]);
    let ty = axis_taps(dims[1], new_dims[1], ratio[1]);
    let tz = axis_taps(dims[2], new_dims[2], ratio[2]);
    let src = v.voxels();
    let (sx, sxy) = (dims[0], dims[0] * dims[1]);
    let lerp = |a: f64, b: f64, w: f64| if w == 0.0 { a } else { a + w * (b - a) };
    let slice = new_dims[0] * new_dims[1];
    let mut out = vec![0f32; slice * new_dims[2]];
    out.par_chunks_mut(slice)
        .zip(tz.par_iter())
        .for_each(|(plane, z)| {
            for (yi, y) in ty.iter().enumerate() {
                let row = &mut plane[yi * new_dims[0]..(yi + 1) * new_dims[0]];
                for (o, x) in row.iter_mut().zip(tx.iter()) {
                    let at = |xx: usize, yy: usize, zz: usize| src[xx + sx * yy + sxy * zz] as f64;
                    let c00 = lerp(at(x.lo, y.lo, z.lo), at(x.hi, y.lo, z.lo), x.w);
                    let c10 = lerp(at(x.lo, y.hi, z.lo), at(x.hi, y.hi, z.lo), x.w);
                    let c01 = lerp(at(x.lo, y.lo, z.hi), at(x.hi, y.lo, z.hi), x.w);
                    let c11 = lerp(at(x.lo, y.hi, z.hi), at(x.hi, y.hi, z.hi), x.w);
                    let c0 = lerp(c00, c10, y.w);
                    let c1 = lerp(c01, c11, y.w);
                    *o = lerp(c0, c1, z.w) as f32;
                }
            }
        });
    Volume::new_unchecked_values(new_dims, new_spacing, out)
        .expect("resampled geometry is valid by construction")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(values: &[f32]) -> Volume {
        Volume::new([values.len(), 1, 1], [1.0; 3], values.to_vec()).unwrap()
    }

    #[test]
    fn clip_bounds() {
        let v = clip_hu(&vol(&[1500.0, -2000.0, 37.5]), HU_MIN, HU_MAX).unwrap();
        assert_eq!(v.voxels(), &[1000.0, -1000.0, 37.5]);
    }

    #[test]
    fn clip_rejects_bad_window_and_nonfinite() {
        assert!(matches!(
            clip_hu(&vol(&[0.0]), 5.0, 5.0),
            Err(VolumeError::BadWindow { .. })
        ));
        let bad = Volume::new_unchecked_values([3, 1, 1], [1.0; 3], vec![0.0, 1.0, f32::INFINITY])
            .unwrap();
        assert!(matches!(
            clip_hu(&bad, HU_MIN, HU_MAX),
            Err(VolumeError::NonFinite { index: 2 })
        ));
    }

    #[test]
    fn normalize_fixed_points() {
        let v = normalize_intensity(&vol(&[-1000.0, 1000.0, 0.0]), HU_MIN, HU_MAX).unwrap();
        assert_eq!(v.voxels(), &[0.0, 1.0, 0.5]);
    }

    #[test]
    fn normalize_requires_clipped_input() {
        let err = normalize_intensity(&vol(&[0.0, 1200.0]), HU_MIN, HU_MAX).unwrap_err();
        assert!(matches!(err, VolumeError::OutOfWindow { index: 1, .. }));
        assert!(err.to_string().contains("1200"));
    }

    #[test]
    fn resample_dims_rounding() {
        let v = Volume::filled([512, 512, 300], [0.7, 0.7, 1.0], 3.0).unwrap();
        let r = resample_spacing(&v, TARGET_SPACING_MM).unwrap();
        assert_eq!(r.dims(), [358, 358, 75]);
        assert_eq!(r.spacing(), TARGET_SPACING_MM);
        assert!(r.voxels().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn resample_collapsing_axis_clamps_to_one() {
        let v = Volume::filled([4, 4, 1], [1.0, 1.0, 1.0], 2.0).unwrap();
        let r = resample_spacing(&v, [1.0, 1.0, 4.0]).unwrap();
        assert_eq!(r.dims(), [4, 4, 1]);
    }

    #[test]
    fn resample_rejects_bad_target() {
        let v = vol(&[1.0]);
        assert!(resample_spacing(&v, [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let v = Volume::from_fn([5, 4, 3], [0.8, 0.9, 2.5], |x, y, z| {
            ((x * 7 + y * 13 + z * 31) % 17) as f32 * 0.37 - 1.1
        })
        .unwrap();
        let r = resize(&v, [5, 4, 3]).unwrap();
        assert_eq!(r.voxels(), v.voxels());
        assert_eq!(r.spacing(), v.spacing());
    }

    #[test]
    fn resize_preserves_extent_and_constants() {
        let v = Volume::filled([10, 7, 3], [0.75, 1.25, 5.0], -4.25).unwrap();
        let r = resize(&v, [256, 256, 64]).unwrap();
        assert_eq!(r.dims(), [256, 256, 64]);
        assert!(r.voxels().iter().all(|&x| x == -4.25));
        for i in 0..3 {
            assert!((r.extent()[i] - v.extent()[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn preprocess_constant_zero_hu() {
        let v = Volume::filled([20, 20, 6], [0.9, 0.9, 3.0], 0.0).unwrap();
        let p = preprocess(&v, ResolutionProfile::Normal).unwrap();
        assert_eq!(p.dims(), [256, 256, 64]);
        assert!(p.voxels().iter().all(|&x| x == 0.5));
    }

    #[test]
    fn preprocess_tags_stage() {
        let bad =
            Volume::new_unchecked_values([2, 1, 1], [1.0; 3], vec![0.0, f32::NAN]).unwrap();
        let err = preprocess(&bad, ResolutionProfile::Normal).unwrap_err();
        assert!(matches!(err, VolumeError::Stage { stage: "clip", .. }));
    }
}
