//! Synthetic two-class phantom volumes standing in for clinical data.
//!
//! Class 0 is a smooth ellipsoidal region with an intact bright boundary
//! ring; class 1 adds dark planar bands through the ellipsoid and a gap in
//! the ring. Both classes draw identical randomness at a given seed, so the
//! only differences between labels are the class signatures themselves.
//! Phantoms are intentionally easy (large intensity margin) so learnability
//! tests are fast and stable; `noise` tunes the difficulty.

use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{CaseRecord, Manifest, Provenance, Split};
use crate::nifti::write_nifti;
use crate::volume::{Orientation, Volume};

/// Minimum extent per axis for the ellipsoid template to fit.
pub const MIN_PHANTOM_DIM: usize = 32;

/// Default phantom size, chosen small for speed.
pub const DEFAULT_PHANTOM_SIZE: (usize, usize, usize) = (64, 64, 32);

const MAX_BANDS: usize = 4;

/// Phantom volume plus the planar band mask used by its class signature.
///
/// The mask marks where bands lie (or would lie, for class 0), which lets a
/// caller compare mean band-region intensity across labels at the same seed.
pub struct PhantomParts {
    pub volume: Volume,
    pub band_mask: Array3<bool>,
}

struct Geometry {
    center: [f32; 3],
    semi_axes: [f32; 3],
    n_bands: usize,
    band_centers: [f32; MAX_BANDS],
    band_half_widths: [f32; MAX_BANDS],
    gap_center: f32,
    gap_half_width: f32,
}

fn draw_geometry(rng: &mut ChaCha8Rng, size: (usize, usize, usize)) -> Geometry {
    let dims = [size.0 as f32, size.1 as f32, size.2 as f32];
    let center = [
        dims[0] / 2.0 + rng.gen_range(-1.5..1.5),
        dims[1] / 2.0 + rng.gen_range(-1.5..1.5),
        dims[2] / 2.0 + rng.gen_range(-1.0..1.0),
    ];
    let semi_axes = [
        dims[0] * rng.gen_range(0.28..0.36),
        dims[1] * rng.gen_range(0.28..0.36),
        dims[2] * rng.gen_range(0.28..0.36),
    ];
    let n_bands = rng.gen_range(2..=MAX_BANDS);
    let mut band_centers = [0.0; MAX_BANDS];
    let mut band_half_widths = [0.0; MAX_BANDS];
    for i in 0..MAX_BANDS {
        // normalized position along height inside the ellipsoid
        band_centers[i] = rng.gen_range(-0.6..0.6);
        band_half_widths[i] = rng.gen_range(1.0..2.0);
    }
    let gap_center = rng.gen_range(-std::f32::consts::PI..std::f32::consts::PI);
    let gap_half_width = rng.gen_range(0.5..1.0);
    Geometry { center, semi_axes, n_bands, band_centers, band_half_widths, gap_center, gap_half_width }
}

/// Generate one phantom along with its band mask.
///
/// Deterministic given (label, size, seed, noise); the geometry and noise
/// draws depend only on (size, seed), so labels 0 and 1 at the same seed
/// share everything but the class signature.
pub fn generate_phantom_parts(
    label: u8,
    size: (usize, usize, usize),
    seed: u64,
    noise: f32,
) -> Result<PhantomParts> {
    if label > 1 {
        return Err(Error::Config(format!("phantom label must be 0 or 1, got {label}")));
    }
    let (h, w, d) = size;
    if h < MIN_PHANTOM_DIM || w < MIN_PHANTOM_DIM || d < MIN_PHANTOM_DIM {
        return Err(Error::Config(format!(
            "phantom size {h}x{w}x{d} too small; each axis must be >= {MIN_PHANTOM_DIM}"
        )));
    }
    if !(0.0..=0.5).contains(&noise) {
        return Err(Error::Config(format!("phantom noise must be in [0, 0.5], got {noise}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geo = draw_geometry(&mut rng, size);

    let mut data = Array3::<f32>::zeros((h, w, d));
    let mut band_mask = Array3::<bool>::from_elem((h, w, d), false);

    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let u: f32 = rng.gen(); // one draw per voxel, label-independent
                let dh = (i as f32 - geo.center[0]) / geo.semi_axes[0];
                let dw = (j as f32 - geo.center[1]) / geo.semi_axes[1];
                let dd = (k as f32 - geo.center[2]) / geo.semi_axes[2];
                let r = (dh * dh + dw * dw + dd * dd).sqrt();

                let in_interior = r < 0.85;
                let in_ring = (0.85..=1.0).contains(&r);

                // planar slabs through the interior, normal to the height axis
                let mut in_band = false;
                if in_interior {
                    let hpos = dh; // normalized height offset
                    for b in 0..geo.n_bands {
                        let half = geo.band_half_widths[b] / geo.semi_axes[0];
                        if (hpos - geo.band_centers[b]).abs() < half {
                            in_band = true;
                            break;
                        }
                    }
                }
                band_mask[(i, j, k)] = in_band;

                // azimuthal gap sector in the boundary ring
                let mut ring_intact = in_ring;
                if in_ring && label == 1 {
                    let theta = (j as f32 - geo.center[1]).atan2(i as f32 - geo.center[0]);
                    let mut delta = (theta - geo.gap_center).abs();
                    if delta > std::f32::consts::PI {
                        delta = 2.0 * std::f32::consts::PI - delta;
                    }
                    if delta < geo.gap_half_width {
                        ring_intact = false;
                    }
                }

                let value = if ring_intact {
                    0.92 + 0.06 * u
                } else if in_band && label == 1 {
                    0.12 + noise * 0.5 * (u - 0.5)
                } else if in_interior || in_ring {
                    0.55 + noise * (u - 0.5)
                } else {
                    0.05 + noise * u
                };
                data[(i, j, k)] = value.clamp(0.0, 1.0);
            }
        }
    }

    let volume = Volume::new(data, [1.0, 1.0, 1.0], Orientation::Canonical)?;
    Ok(PhantomParts { volume, band_mask })
}

/// Generate one phantom volume at the default noise level.
pub fn generate_phantom(label: u8, size: (usize, usize, usize), seed: u64) -> Result<Volume> {
    Ok(generate_phantom_parts(label, size, seed, SynthSpec::DEFAULT_NOISE)?.volume)
}

/// Parameters for a synthetic dataset.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_normal: usize,
    pub n_pas: usize,
    pub size: (usize, usize, usize),
    pub seed: u64,
    /// Scans assigned to each synthetic patient; > 1 exercises
    /// patient-disjoint splitting.
    pub scans_per_patient: usize,
    pub noise: f32,
}

impl SynthSpec {
    pub const DEFAULT_NOISE: f32 = 0.08;
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_normal: 0,
            n_pas: 0,
            size: DEFAULT_PHANTOM_SIZE,
            seed: 0,
            scans_per_patient: 1,
            noise: SynthSpec::DEFAULT_NOISE,
        }
    }
}

/// Write `n_normal + n_pas` phantom NIfTI volumes into `out_dir` and return
/// the matching manifest (all records unassigned, provenance original).
///
/// Patients are per-class, so every patient's scans share one label.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if spec.n_normal + spec.n_pas == 0 {
        return Err(Error::Config("dataset must contain at least one case".into()));
    }
    if spec.scans_per_patient == 0 {
        return Err(Error::Config("scans_per_patient must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut manifest = Manifest::new(Vec::new(), spec.seed)?;
    let mut case_idx = 0usize;
    let mut patient_idx = 0usize;
    for (label, count) in [(0u8, spec.n_normal), (1u8, spec.n_pas)] {
        let mut scans_left = 0usize;
        for _ in 0..count {
            if scans_left == 0 {
                patient_idx += 1;
                scans_left = spec.scans_per_patient;
            }
            scans_left -= 1;
            case_idx += 1;
            let case_id = format!("case_{case_idx:04}");
            let case_seed = spec.seed.wrapping_add(case_idx as u64);
            let volume = generate_phantom_parts(label, spec.size, case_seed, spec.noise)?.volume;
            let path = out_dir.join(format!("{case_id}.nii"));
            write_nifti(&volume, &path).map_err(|e| e.for_case(&case_id))?;
            manifest.push(CaseRecord {
                case_id,
                patient_id: format!("patient_{patient_idx:04}"),
                path: path.clone(),
                label,
                split: Split::Unassigned,
                provenance: Provenance::Original,
            })?;
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_inputs_give_bit_identical_volumes() {
        let a = generate_phantom(1, (64, 64, 32), 42).unwrap();
        let b = generate_phantom(1, (64, 64, 32), 42).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn band_region_darker_for_pas_at_same_seed() {
        for seed in [1, 7, 19] {
            let normal = generate_phantom_parts(0, (64, 64, 32), seed, 0.08).unwrap();
            let pas = generate_phantom_parts(1, (64, 64, 32), seed, 0.08).unwrap();
            assert_eq!(normal.band_mask, pas.band_mask);
            let mean = |p: &PhantomParts| {
                let mut sum = 0.0f64;
                let mut n = 0usize;
                for (idx, &m) in p.band_mask.indexed_iter() {
                    if m {
                        sum += p.volume.data()[idx] as f64;
                        n += 1;
                    }
                }
                sum / n as f64
            };
            let gap = mean(&normal) - mean(&pas);
            assert!(gap > 0.2, "seed {seed}: band-region gap {gap} too small");
        }
    }

    #[test]
    fn values_stay_in_unit_range() {
        for label in [0, 1] {
            let v = generate_phantom(label, (64, 64, 32), 3).unwrap();
            assert!(v.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_phantom(0, (64, 64, 32), 1).unwrap();
        let b = generate_phantom(0, (64, 64, 32), 2).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn undersized_axis_is_rejected() {
        assert!(matches!(
            generate_phantom(0, (64, 64, 31), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(generate_phantom(2, (64, 64, 32), 0), Err(Error::Config(_))));
    }

    #[test]
    fn dataset_counts_and_patients() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            n_normal: 5,
            n_pas: 3,
            size: (32, 32, 32),
            seed: 11,
            scans_per_patient: 2,
            ..SynthSpec::default()
        };
        let manifest = generate_dataset(&spec, tmp.path()).unwrap();
        assert_eq!(manifest.records().len(), 8);
        let normals = manifest.records().iter().filter(|r| r.label == 0).count();
        assert_eq!(normals, 5);
        // per-class patients, consistent labels within a patient
        for r in manifest.records() {
            for s in manifest.records() {
                if r.patient_id == s.patient_id {
                    assert_eq!(r.label, s.label);
                }
            }
        }
        // 5 normals over 2-scan patients -> 3 patients; 3 pas -> 2 patients
        let patients: std::collections::BTreeSet<_> =
            manifest.records().iter().map(|r| r.patient_id.clone()).collect();
        assert_eq!(patients.len(), 5);
        // files exist and round-trip
        let v = crate::nifti::read_nifti(&manifest.records()[0].path).unwrap();
        assert_eq!(v.data().dim(), (32, 32, 32));
    }
}
