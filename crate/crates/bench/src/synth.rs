//! Octant-lesion phantoms with templated reports.
//!
//! Each volume is a constant background with up to eight ellipsoidal bright
//! regions, one per octant. The report names the octant of every lesion, so
//! image and text agree by construction.

use crate::BenchError;
use argus_core::curation::{RawRecord, Source};
use argus_core::volume::{Volume, HU_MAX, HU_MIN};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const NO_LESION_REPORT: &str = "No focal lesions identified across all regions.";
const PRIOR_STUDY_NOTE: &str = "Compared to the previous study of March 2019, no interval change.";
const CLOSING: &str = "The remaining parenchyma and mediastinal structures appear unremarkable.";

fn default_templates() -> Vec<String> {
    [
        "A hyperdense lesion is seen in the {region} region.",
        "There is a well-circumscribed bright focus in the {region} region.",
        "A focal high-attenuation lesion occupies the {region} region.",
    ]
    .map(String::from)
    .to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_samples: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive range for the number of lesions, at most 8.
    pub lesions: [usize; 2],
    /// Inclusive range for ellipsoid semi-axes, in voxels.
    pub radius: [f64; 2],
    pub background: f32,
    pub intensity: [f32; 2],
    /// Finding templates; `{region}` is replaced by the octant name.
    pub templates: Vec<String>,
    /// Probability of appending a prior-study sentence (removed by curation).
    pub prior_note_rate: f64,
    /// Set from the run seed, never from the config document.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_samples: 32,
            dims: [32, 32, 24],
            spacing: [2.0, 2.0, 4.0],
            lesions: [1, 3],
            radius: [1.5, 3.0],
            background: 0.1,
            intensity: [0.9, 0.9],
            templates: default_templates(),
            prior_note_rate: 0.25,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub octant: usize,
    pub center: [usize; 3],
    pub radii: [f64; 3],
    pub intensity: f32,
}

#[derive(Debug, Clone)]
pub struct SynthSample {
    pub id: String,
    pub source: Source,
    pub official_test: bool,
    /// Intensities in `[0, 1]`.
    pub volume: Volume,
    pub lesions: Vec<Lesion>,
    pub findings: String,
    pub impression: Option<String>,
}

/// Octant `o` has x in the high half if bit 0 is set, y if bit 1, z if bit 2.
pub fn octant_name(o: usize) -> String {
    let z = if o & 4 != 0 { "upper" } else { "lower" };
    let x = if o & 1 != 0 { "right" } else { "left" };
    let y = if o & 2 != 0 { "posterior" } else { "anterior" };
    format!("{z} {x} {y}")
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        let bad = |m: String| Err(BenchError::Validation(m));
        if self.lesions[0] > self.lesions[1] || self.lesions[1] > 8 {
            return bad(format!("lesion count range {:?} must be ordered and at most 8", self.lesions));
        }
        if !(self.radius[0] >= 0.5 && self.radius[0] <= self.radius[1]) {
            return bad(format!("radius range {:?} must be ordered with minimum >= 0.5", self.radius));
        }
        if self.templates.is_empty() || self.templates.iter().any(|t| !t.contains("{region}")) {
            return bad("every finding template needs a {region} placeholder".into());
        }
        if !(self.intensity[0] <= self.intensity[1]) {
            return bad(format!("intensity range {:?} is not ordered", self.intensity));
        }
        if self.lesions[1] > 0 {
            // A lesion of the largest radius plus a one-voxel margin on each
            // side must fit inside an octant.
            let need = 2 * self.radius[1].ceil() as usize + 3;
            for (axis, &d) in self.dims.iter().enumerate() {
                if d / 2 < need {
                    return bad(format!(
                        "axis {axis}: dims {d} smaller than max lesion extent (each octant needs {need} voxels)"
                    ));
                }
            }
        }
        Volume::filled(self.dims, self.spacing, 0.0).map_err(|e| BenchError::Validation(e.to_string()))?;
        Ok(())
    }

    pub fn generate(&self) -> Result<Vec<SynthSample>, BenchError> {
        self.validate()?;
        Ok((0..self.n_samples).map(|i| self.sample(i)).collect())
    }

    fn sample(&self, i: usize) -> SynthSample {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (i as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let k = rng.random_range(self.lesions[0]..=self.lesions[1]);
        let mut octants: Vec<usize> = (0..8).collect();
        octants.shuffle(&mut rng);
        let mut chosen = octants[..k].to_vec();
        chosen.sort_unstable();
        let lesions: Vec<Lesion> = chosen.into_iter().map(|o| self.place(o, &mut rng)).collect();
        let volume = self.render(&lesions);

        let source = Source::ALL[i % 3];
        let official_test = source == Source::CtRate && (i / 3) % 2 == 1;
        let id = match source {
            Source::BimcvR => format!("bimcv_{i:04}"),
            Source::Inspect => format!("inspect_{i:04}"),
            Source::CtRate if official_test => format!("valid_{i}_a_1"),
            Source::CtRate => format!("train_{i}_a_1"),
        };
        let mut sentences: Vec<String> = lesions
            .iter()
            .map(|l| {
                let t = &self.templates[rng.random_range(0..self.templates.len())];
                t.replace("{region}", &octant_name(l.octant))
            })
            .collect();
        let impression = if lesions.is_empty() {
            sentences.push(NO_LESION_REPORT.to_string());
            None
        } else {
            sentences.push(CLOSING.to_string());
            if rng.random_bool(self.prior_note_rate) {
                sentences.push(PRIOR_STUDY_NOTE.to_string());
            }
            let n = lesions.len();
            Some(format!("Findings consistent with {n} focal lesion{}.", if n == 1 { "" } else { "s" }))
        };
        SynthSample {
            id,
            source,
            official_test,
            volume,
            lesions,
            findings: sentences.join(" "),
            impression,
        }
    }

    fn place(&self, octant: usize, rng: &mut ChaCha8Rng) -> Lesion {
        let mut center = [0usize; 3];
        let mut radii = [0f64; 3];
        for axis in 0..3 {
            let half = self.dims[axis] / 2;
            let r = rng.random_range(self.radius[0]..=self.radius[1]);
            let lo = if octant >> axis & 1 == 1 { half } else { 0 };
            let margin = r.ceil() as usize + 1;
            center[axis] = rng.random_range(lo + margin..lo + half - margin);
            radii[axis] = r;
        }
        Lesion {
            octant,
            center,
            radii,
            intensity: rng.random_range(self.intensity[0]..=self.intensity[1]),
        }
    }

    fn render(&self, lesions: &[Lesion]) -> Volume {
        Volume::from_fn(self.dims, self.spacing, |x, y, z| {
            let p = [x, y, z];
            lesions
                .iter()
                .find(|l| {
                    (0..3)
                        .map(|a| ((p[a] as f64 - l.center[a] as f64) / l.radii[a]).powi(2))
                        .sum::<f64>()
                        <= 1.0
                })
                .map_or(self.background, |l| l.intensity)
        })
        .expect("phantom geometry is validated")
    }
}

impl SynthSample {
    /// The corpus row for this sample, pointing at `volume_path`.
    pub fn record(&self, volume_path: String) -> RawRecord {
        let ct = self.source == Source::CtRate;
        RawRecord {
            id: self.id.clone(),
            source: self.source,
            findings: ct.then(|| self.findings.clone()),
            impression: if ct { self.impression.clone() } else { None },
            report: if ct {
                None
            } else {
                Some(match &self.impression {
                    Some(imp) => format!("{} {imp}", self.findings),
                    None => self.findings.clone(),
                })
            },
            official_test: self.official_test,
            volume: Some(volume_path),
        }
    }

    /// The phantom in Hounsfield units: `[0, 1]` maps linearly onto the
    /// clipping window, so preprocessing recovers the generated intensities.
    pub fn volume_hu(&self) -> Volume {
        self.volume
            .map(|v| v * (HU_MAX - HU_MIN) + HU_MIN)
            .expect("finite intensities stay finite")
    }
}

/// Number of 6-connected components of voxels above `threshold`.
pub fn count_components(v: &Volume, threshold: f32) -> usize {
    let [nx, ny, nz] = v.dims();
    let mut seen = vec![false; v.len()];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..v.len() {
        if seen[start] || v.voxels()[start] <= threshold {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (x, y, z) = (i % nx, (i / nx) % ny, i / (nx * ny));
            let mut visit = |xx: usize, yy: usize, zz: usize| {
                let j = v.index(xx, yy, zz);
                if !seen[j] && v.voxels()[j] > threshold {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if x > 0 { visit(x - 1, y, z); }
            if x + 1 < nx { visit(x + 1, y, z); }
            if y > 0 { visit(x, y - 1, z); }
            if y + 1 < ny { visit(x, y + 1, z); }
            if z > 0 { visit(x, y, z - 1); }
            if z + 1 < nz { visit(x, y, z + 1); }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_phantom_is_constant() {
        let spec = SynthSpec { lesions: [0, 0], n_samples: 3, ..SynthSpec::default() };
        for s in spec.generate().unwrap() {
            assert!(s.volume.voxels().iter().all(|&v| v == 0.1));
            assert_eq!(s.findings, NO_LESION_REPORT);
            assert!(s.impression.is_none());
        }
    }

    #[test]
    fn two_lesions_two_components() {
        let spec = SynthSpec { lesions: [2, 2], n_samples: 20, seed: 4, ..SynthSpec::default() };
        for s in spec.generate().unwrap() {
            assert_eq!(count_components(&s.volume, 0.5), 2, "{}", s.id);
            for l in &s.lesions {
                assert!(s.findings.contains(&octant_name(l.octant)));
            }
        }
    }

    #[test]
    fn rejects_lesions_larger_than_octants() {
        let spec = SynthSpec { dims: [32, 32, 8], ..SynthSpec::default() };
        let err = spec.validate().unwrap_err().to_string();
        assert!(err.contains("axis 2"), "{err}");
    }

    #[test]
    fn hu_round_trip_through_the_window() {
        let s = &SynthSpec::default().generate().unwrap()[0];
        let hu = s.volume_hu();
        assert!(hu.voxels().iter().all(|&v| v == -800.0 || v == 800.0));
    }
}
