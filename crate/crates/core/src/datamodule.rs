//! Dataset assembly: stratified patient-disjoint splitting, minority
//! oversampling with geometric augmentation, and batch iteration.
//!
//! Splitting assigns whole patients greedily to the most-underfilled
//! (split, class) bucket in seeded random patient order, which reproduces
//! exact per-class counts when patients have one scan each. Augmentation is
//! offline: each augmented record's transform parameters are persisted so
//! the volume can be regenerated bit-identically from its source.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::manifest::{CaseRecord, Manifest, Provenance, Split};
use crate::nifti::{read_nifti, write_nifti};
use crate::preprocess::zoom_center;
use crate::volume::Volume;

/// Train/val/test ratios plus the shuffling seed.
#[derive(Debug, Clone, Copy)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    /// The 70/10/20 split used throughout.
    pub fn standard(seed: u64) -> SplitSpec {
        SplitSpec { train: 0.70, val: 0.10, test: 0.20, seed }
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|&r| r <= 0.0) {
            return Err(Error::Config("split ratios must be positive".into()));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios must sum to 1.0, got {sum}")));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items across the three ratios.
fn split_targets(n: usize, spec: &SplitSpec) -> [usize; 3] {
    let ratios = [spec.train, spec.val, spec.test];
    let exact: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut targets: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let mut leftover = n - targets.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.total_cmp(&ra)
    });
    for &i in &order {
        if leftover == 0 {
            break;
        }
        targets[i] += 1;
        leftover -= 1;
    }
    [targets[0], targets[1], targets[2]]
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Assign every record to train/val/test at patient granularity so that
/// per-class counts match the ratios as closely as patient sizes allow.
///
/// Deterministic given the seed. A patient whose scans carry conflicting
/// labels is an error, not silently resolved.
pub fn stratified_split(manifest: &Manifest, spec: &SplitSpec) -> Result<Manifest> {
    spec.validate()?;
    for r in manifest.records() {
        if r.split != Split::Unassigned {
            return Err(Error::Data(format!(
                "case {} already assigned to {}; split expects an unassigned manifest",
                r.case_id, r.split
            )));
        }
    }

    // patient -> (label, record count), rejecting mixed-label patients
    let mut patients: BTreeMap<&str, (u8, usize)> = BTreeMap::new();
    for r in manifest.records() {
        match patients.get_mut(r.patient_id.as_str()) {
            None => {
                patients.insert(&r.patient_id, (r.label, 1));
            }
            Some((label, count)) => {
                if *label != r.label {
                    return Err(Error::Data(format!(
                        "patient {} has conflicting labels across scans",
                        r.patient_id
                    )));
                }
                *count += 1;
            }
        }
    }

    let class_total = |c: u8| {
        patients.values().filter(|(l, _)| *l == c).map(|(_, n)| n).sum::<usize>()
    };
    let targets = [split_targets(class_total(0), spec), split_targets(class_total(1), spec)];
    let mut assigned = [[0usize; 3]; 2];

    let mut patient_ids: Vec<&str> = patients.keys().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    for i in (1..patient_ids.len()).rev() {
        patient_ids.swap(i, rng.gen_range(0..=i));
    }

    let mut patient_split: BTreeMap<&str, Split> = BTreeMap::new();
    for pid in patient_ids {
        let (label, count) = patients[pid];
        let c = label as usize;
        // most-underfilled bucket for this class; ties go to the earlier split
        let best = (0..3)
            .max_by(|&a, &b| {
                let da = targets[c][a] as i64 - assigned[c][a] as i64;
                let db = targets[c][b] as i64 - assigned[c][b] as i64;
                da.cmp(&db).then(b.cmp(&a))
            })
            .unwrap();
        assigned[c][best] += count;
        patient_split.insert(pid, SPLITS[best]);
    }

    let mut out = manifest.clone();
    out.update(|r| r.split = patient_split[r.patient_id.as_str()])?;
    Ok(out)
}

/// Which geometric transforms augmentation may draw from, and the seed.
#[derive(Debug, Clone)]
pub struct AugmentationSpec {
    pub flip_height: bool,
    pub flip_width: bool,
    pub rotations_deg: Vec<u16>,
    pub zoom_range: (f64, f64),
    pub seed: u64,
}

impl AugmentationSpec {
    /// Flips along height/width, in-plane rotations {90, 180, 270}, and
    /// zoom-in factors in [1.1, 1.3].
    pub fn standard(seed: u64) -> AugmentationSpec {
        AugmentationSpec {
            flip_height: true,
            flip_width: true,
            rotations_deg: vec![90, 180, 270],
            zoom_range: (1.1, 1.3),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rotations_deg.iter().any(|r| ![90, 180, 270].contains(r)) {
            return Err(Error::Config("rotations must be from {90, 180, 270}".into()));
        }
        if !(self.zoom_range.0 > 1.0 && self.zoom_range.1 >= self.zoom_range.0) {
            return Err(Error::Config(format!(
                "zoom range must satisfy 1.0 < lo <= hi, got [{}, {}]",
                self.zoom_range.0, self.zoom_range.1
            )));
        }
        if !self.flip_height && !self.flip_width && self.rotations_deg.is_empty() {
            return Err(Error::Config("augmentation spec enables no transforms".into()));
        }
        Ok(())
    }
}

/// One sampled transform: `rot_deg` 0 and `zoom` 1.0 mean "not applied".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_w: bool,
    pub rot_deg: u16,
    pub zoom: f64,
}

impl AugmentDraw {
    pub fn is_identity(&self) -> bool {
        !self.flip_h && !self.flip_w && self.rot_deg == 0 && self.zoom == 1.0
    }
}

/// Sample a transform: each enabled component applies independently with
/// probability 1/2; if none is drawn, one enabled component is forced so the
/// augmented volume always differs from its source.
pub fn draw_augmentation(spec: &AugmentationSpec, rng: &mut ChaCha8Rng) -> AugmentDraw {
    let mut draw = AugmentDraw { flip_h: false, flip_w: false, rot_deg: 0, zoom: 1.0 };
    if spec.flip_height && rng.gen_bool(0.5) {
        draw.flip_h = true;
    }
    if spec.flip_width && rng.gen_bool(0.5) {
        draw.flip_w = true;
    }
    if !spec.rotations_deg.is_empty() && rng.gen_bool(0.5) {
        draw.rot_deg = spec.rotations_deg[rng.gen_range(0..spec.rotations_deg.len())];
    }
    if rng.gen_bool(0.5) {
        draw.zoom = rng.gen_range(spec.zoom_range.0..=spec.zoom_range.1);
    }
    if draw.is_identity() {
        if spec.flip_height {
            draw.flip_h = true;
        } else if spec.flip_width {
            draw.flip_w = true;
        } else {
            draw.rot_deg = spec.rotations_deg[rng.gen_range(0..spec.rotations_deg.len())];
        }
    }
    draw
}

/// Rotate 90° in the height-width plane, `times` quarter turns.
fn rotate_hw(data: &Array3<f32>, times: u16) -> Array3<f32> {
    let mut out = data.clone();
    for _ in 0..(times % 4) {
        // (i, j) -> (j, H-1-i): transpose then reverse the new width axis
        let mut t = out.view().permuted_axes([1, 0, 2]).to_owned();
        t.invert_axis(ndarray::Axis(1));
        out = t;
    }
    out
}

/// Apply a sampled transform. Rotations of 90°/270° require a square
/// height-width plane so the shape is preserved.
pub fn apply_augmentation(v: &Volume, draw: &AugmentDraw) -> Result<Volume> {
    let (h, w, _) = v.shape();
    if draw.rot_deg % 180 != 0 && h != w {
        return Err(Error::Config(format!(
            "in-plane rotation {}\u{b0} needs square height/width, got {h}x{w}",
            draw.rot_deg
        )));
    }
    if !(draw.zoom == 1.0 || draw.zoom > 1.0) {
        return Err(Error::Config(format!("zoom factor must be >= 1.0, got {}", draw.zoom)));
    }
    let mut data = v.data().clone();
    if draw.flip_h {
        data.invert_axis(ndarray::Axis(0));
    }
    if draw.flip_w {
        data.invert_axis(ndarray::Axis(1));
    }
    if draw.rot_deg != 0 {
        data = rotate_hw(&data, draw.rot_deg / 90);
    }
    if draw.zoom != 1.0 {
        data = zoom_center(&data, draw.zoom);
    }
    Volume::new(data, v.spacing(), v.orientation())
}

/// Persisted parameters of one augmented record.
#[derive(Debug, Clone, PartialEq)]
pub struct AugRecord {
    pub case_id: String,
    pub source_id: String,
    pub draw: AugmentDraw,
}

/// An oversampling plan: the balanced manifest plus the transform
/// parameters for every augmented record it introduces.
#[derive(Debug, Clone)]
pub struct AugmentPlan {
    pub manifest: Manifest,
    pub records: Vec<AugRecord>,
}

/// Plan minority oversampling of the training split: augmented copies of
/// minority originals (round-robin over sources) until train class counts
/// are equal. Pure bookkeeping; `materialize_augmented` writes the volumes.
pub fn oversample_minority(
    manifest: &Manifest,
    spec: &AugmentationSpec,
    out_dir: impl AsRef<Path>,
) -> Result<AugmentPlan> {
    spec.validate()?;
    let counts = manifest.counts(Split::Train);
    let minority: u8 = if counts[0] <= counts[1] { 0 } else { 1 };
    let deficit = counts[1 - minority as usize] - counts[minority as usize];
    if counts[minority as usize] == 0 && deficit > 0 {
        return Err(Error::Data("training split has an empty minority class".into()));
    }

    let sources: Vec<CaseRecord> = manifest
        .split_records(Split::Train)
        .into_iter()
        .filter(|r| r.label == minority && r.provenance == Provenance::Original)
        .cloned()
        .collect();
    if deficit > 0 && sources.is_empty() {
        return Err(Error::Data(
            "no original minority records in the training split to augment".into(),
        ));
    }

    let out_dir = out_dir.as_ref();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = manifest.clone();
    let mut records = Vec::with_capacity(deficit);
    let mut copies_per_source = vec![0usize; sources.len()];
    for n in 0..deficit {
        let src = &sources[n % sources.len()];
        copies_per_source[n % sources.len()] += 1;
        let copy_no = copies_per_source[n % sources.len()];
        let case_id = format!("{}_aug{copy_no}", src.case_id);
        let draw = draw_augmentation(spec, &mut rng);
        out.push(CaseRecord {
            case_id: case_id.clone(),
            patient_id: src.patient_id.clone(),
            path: out_dir.join(format!("{case_id}.nii")),
            label: src.label,
            split: Split::Train,
            provenance: Provenance::Augmented,
        })?;
        records.push(AugRecord { case_id, source_id: src.case_id.clone(), draw });
    }
    Ok(AugmentPlan { manifest: out, records })
}

/// Read each plan entry's source volume, apply its transform, and write the
/// augmented NIfTI file next to the path recorded in the manifest.
pub fn materialize_augmented(plan: &AugmentPlan) -> Result<()> {
    let by_id: BTreeMap<&str, &CaseRecord> =
        plan.manifest.records().iter().map(|r| (r.case_id.as_str(), r)).collect();
    for aug in &plan.records {
        let run = || -> Result<()> {
            let src = by_id
                .get(aug.source_id.as_str())
                .ok_or_else(|| Error::Data(format!("source {} not in manifest", aug.source_id)))?;
            let dst = by_id
                .get(aug.case_id.as_str())
                .ok_or_else(|| Error::Data(format!("case {} not in manifest", aug.case_id)))?;
            if let Some(dir) = dst.path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let volume = read_nifti(&src.path)?;
            let augmented = apply_augmentation(&volume, &aug.draw)?;
            write_nifti(&augmented, &dst.path)?;
            Ok(())
        };
        run().map_err(|e| e.for_case(&aug.case_id))?;
    }
    Ok(())
}

const SIDECAR_HEADER: &str = "case_id,source_id,flip_h,flip_w,rot_deg,zoom";

/// Write augmentation parameters as the sidecar CSV
/// `case_id,source_id,flip_h,flip_w,rot_deg,zoom`.
pub fn save_aug_sidecar(records: &[AugRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "# format_version=1").map_err(|e| Error::io(path, e))?;
    writeln!(f, "{SIDECAR_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.case_id, r.source_id, r.draw.flip_h, r.draw.flip_w, r.draw.rot_deg, r.draw.zoom
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Read an augmentation sidecar CSV back.
pub fn load_aug_sidecar(path: impl AsRef<Path>) -> Result<Vec<AugRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    let mut saw_header = false;
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            if line.trim() != SIDECAR_HEADER {
                return Err(Error::Format(format!(
                    "unexpected sidecar header in {}: {line}",
                    path.display()
                )));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(Error::Format(format!("bad sidecar row in {}: {line}", path.display())));
        }
        let parse_err = |what: &str| Error::Format(format!("bad {what} in sidecar row: {line}"));
        records.push(AugRecord {
            case_id: fields[0].to_string(),
            source_id: fields[1].to_string(),
            draw: AugmentDraw {
                flip_h: fields[2].parse().map_err(|_| parse_err("flip_h"))?,
                flip_w: fields[3].parse().map_err(|_| parse_err("flip_w"))?,
                rot_deg: fields[4].parse().map_err(|_| parse_err("rot_deg"))?,
                zoom: fields[5].parse().map_err(|_| parse_err("zoom"))?,
            },
        });
    }
    Ok(records)
}

/// Deterministic per-epoch visit order over `n` records.
pub fn epoch_order(n: usize, shuffle: bool, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    if shuffle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((epoch as u64) << 32));
        for i in (1..n).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
    }
    order
}

/// Group one split's records into batches for one epoch. Every record
/// appears exactly once; the final partial batch is kept.
pub fn make_batches<'a>(
    manifest: &'a Manifest,
    split: Split,
    batch_size: usize,
    shuffle: bool,
    seed: u64,
    epoch: usize,
) -> Result<Vec<Vec<&'a CaseRecord>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let records = manifest.split_records(split);
    let order = epoch_order(records.len(), shuffle, seed, epoch);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| chunk.iter().map(|&i| records[i]).collect())
        .collect())
}

/// Load a batch's volumes and labels; a missing or unreadable file is a
/// data error naming the case.
pub fn load_batch(records: &[&CaseRecord]) -> Result<(Vec<Array3<f32>>, Vec<u8>)> {
    let mut volumes = Vec::with_capacity(records.len());
    let mut labels = Vec::with_capacity(records.len());
    for rec in records {
        if !rec.path.exists() {
            return Err(Error::Data(format!(
                "case {}: volume file {} is missing",
                rec.case_id,
                rec.path.display()
            )));
        }
        let v = read_nifti(&rec.path).map_err(|e| e.for_case(&rec.case_id))?;
        volumes.push(v.into_data());
        labels.push(rec.label);
    }
    Ok((volumes, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Orientation;
    use std::path::PathBuf;

    fn synthetic_manifest(n_normal: usize, n_pas: usize, scans_per_patient: usize) -> Manifest {
        let mut records = Vec::new();
        let mut case = 0usize;
        let mut patient = 0usize;
        for (label, count) in [(0u8, n_normal), (1u8, n_pas)] {
            let mut left = 0;
            for _ in 0..count {
                if left == 0 {
                    patient += 1;
                    left = scans_per_patient;
                }
                left -= 1;
                case += 1;
                records.push(CaseRecord {
                    case_id: format!("case_{case:04}"),
                    patient_id: format!("patient_{patient:04}"),
                    path: PathBuf::from(format!("/nonexistent/case_{case:04}.nii")),
                    label,
                    split: Split::Unassigned,
                    provenance: Provenance::Original,
                });
            }
        }
        Manifest::new(records, 0).unwrap()
    }

    #[test]
    fn split_counts_on_853_280_cohort() {
        let manifest = synthetic_manifest(853, 280, 1);
        let split = stratified_split(&manifest, &SplitSpec::standard(0)).unwrap();
        assert_eq!(split.counts(Split::Train), [597, 196]);
        assert_eq!(split.counts(Split::Val), [85, 28]);
        assert_eq!(split.counts(Split::Test), [171, 56]);
    }

    #[test]
    fn split_is_deterministic_and_seed_sensitive() {
        let manifest = synthetic_manifest(40, 20, 1);
        let a = stratified_split(&manifest, &SplitSpec::standard(3)).unwrap();
        let b = stratified_split(&manifest, &SplitSpec::standard(3)).unwrap();
        for (ra, rb) in a.records().iter().zip(b.records()) {
            assert_eq!(ra.split, rb.split);
        }
        let c = stratified_split(&manifest, &SplitSpec::standard(4)).unwrap();
        assert_eq!(a.counts(Split::Train), c.counts(Split::Train));
        assert_eq!(a.counts(Split::Val), c.counts(Split::Val));
        let differs = a
            .records()
            .iter()
            .zip(c.records())
            .any(|(ra, rc)| ra.split != rc.split);
        assert!(differs, "different seeds should shuffle patients differently");
    }

    #[test]
    fn patients_stay_together() {
        let manifest = synthetic_manifest(8, 4, 4);
        let split = stratified_split(&manifest, &SplitSpec::standard(1)).unwrap();
        let mut per_patient: BTreeMap<&str, Split> = BTreeMap::new();
        for r in split.records() {
            let entry = per_patient.entry(r.patient_id.as_str()).or_insert(r.split);
            assert_eq!(*entry, r.split, "patient {} straddles splits", r.patient_id);
        }
    }

    #[test]
    fn conflicting_patient_labels_are_rejected() {
        let records = vec![
            CaseRecord {
                case_id: "a".into(),
                patient_id: "p1".into(),
                path: PathBuf::from("/x/a.nii"),
                label: 0,
                split: Split::Unassigned,
                provenance: Provenance::Original,
            },
            CaseRecord {
                case_id: "b".into(),
                patient_id: "p1".into(),
                path: PathBuf::from("/x/b.nii"),
                label: 1,
                split: Split::Unassigned,
                provenance: Provenance::Original,
            },
        ];
        let manifest = Manifest::new(records, 0).unwrap();
        let err = stratified_split(&manifest, &SplitSpec::standard(0)).unwrap_err();
        assert!(err.to_string().contains("p1"), "error should name the patient: {err}");
    }

    #[test]
    fn bad_ratios_are_rejected() {
        let spec = SplitSpec { train: 0.5, val: 0.1, test: 0.3, seed: 0 };
        assert!(matches!(spec.validate(), Err(Error::Config(_))));
    }

    fn ramp_volume(h: usize, w: usize, d: usize) -> Volume {
        let data = Array3::from_shape_fn((h, w, d), |(i, j, k)| {
            (i * 10_000 + j * 100 + k) as f32
        });
        Volume::new(data, [1.0, 1.0, 1.0], Orientation::Canonical).unwrap()
    }

    #[test]
    fn flip_is_an_involution() {
        let v = ramp_volume(16, 16, 8);
        let draw = AugmentDraw { flip_h: true, flip_w: false, rot_deg: 0, zoom: 1.0 };
        let once = apply_augmentation(&v, &draw).unwrap();
        assert_ne!(v.data(), once.data());
        let twice = apply_augmentation(&once, &draw).unwrap();
        assert_eq!(v.data(), twice.data());
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let v = ramp_volume(16, 16, 8);
        let draw = AugmentDraw { flip_h: false, flip_w: false, rot_deg: 90, zoom: 1.0 };
        let mut cur = v.data().clone();
        for _ in 0..4 {
            cur = apply_augmentation(
                &Volume::new(cur, [1.0; 3], Orientation::Canonical).unwrap(),
                &draw,
            )
            .unwrap()
            .into_data();
        }
        assert_eq!(&cur, v.data());
        // two quarter turns match one half turn
        let d90 = AugmentDraw { rot_deg: 90, ..draw };
        let d180 = AugmentDraw { rot_deg: 180, ..draw };
        let twice = apply_augmentation(&apply_augmentation(&v, &d90).unwrap(), &d90).unwrap();
        let half = apply_augmentation(&v, &d180).unwrap();
        assert_eq!(twice.data(), half.data());
    }

    #[test]
    fn rotation_needs_square_plane() {
        let v = ramp_volume(16, 12, 8);
        let draw = AugmentDraw { flip_h: false, flip_w: false, rot_deg: 90, zoom: 1.0 };
        assert!(apply_augmentation(&v, &draw).is_err());
        let half = AugmentDraw { rot_deg: 180, ..draw };
        assert!(apply_augmentation(&v, &half).is_ok());
    }

    #[test]
    fn draw_never_yields_identity_and_is_deterministic() {
        let spec = AugmentationSpec::standard(5);
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let draws: Vec<AugmentDraw> = (0..500).map(|_| draw_augmentation(&spec, &mut rng)).collect();
        assert!(draws.iter().all(|d| !d.is_identity()));
        assert!(draws.iter().all(|d| d.zoom == 1.0 || (1.1..=1.3).contains(&d.zoom)));
        let mut rng2 = ChaCha8Rng::seed_from_u64(spec.seed);
        let again: Vec<AugmentDraw> = (0..500).map(|_| draw_augmentation(&spec, &mut rng2)).collect();
        assert_eq!(draws, again);
    }

    #[test]
    fn oversample_balances_round_robin() {
        let mut manifest = synthetic_manifest(10, 3, 1);
        manifest.update(|r| r.split = Split::Train).unwrap();
        let plan = oversample_minority(&manifest, &AugmentationSpec::standard(0), "/tmp/aug").unwrap();
        assert_eq!(plan.manifest.counts(Split::Train), [10, 10]);
        assert_eq!(plan.records.len(), 7);
        // 7 copies over 3 sources -> 3/2/2 per source
        let mut per_source: BTreeMap<&str, usize> = BTreeMap::new();
        for r in &plan.records {
            *per_source.entry(r.source_id.as_str()).or_default() += 1;
        }
        let mut counts: Vec<usize> = per_source.values().copied().collect();
        counts.sort_unstable();
        assert_eq!(counts, vec![2, 2, 3]);
        for r in plan.manifest.records() {
            if r.provenance == Provenance::Augmented {
                assert_eq!(r.split, Split::Train);
            }
        }
    }

    #[test]
    fn oversample_balances_853_280_cohort() {
        let manifest = synthetic_manifest(853, 280, 1);
        let split = stratified_split(&manifest, &SplitSpec::standard(0)).unwrap();
        let plan = oversample_minority(&split, &AugmentationSpec::standard(0), "/tmp/aug").unwrap();
        assert_eq!(plan.manifest.counts(Split::Train), [597, 597]);
        assert_eq!(plan.manifest.split_records(Split::Train).len(), 1194);
        // val/test untouched
        assert_eq!(plan.manifest.counts(Split::Val), [85, 28]);
        assert_eq!(plan.manifest.counts(Split::Test), [171, 56]);
    }

    #[test]
    fn balanced_train_set_is_a_fixed_point() {
        let mut manifest = synthetic_manifest(4, 4, 1);
        manifest.update(|r| r.split = Split::Train).unwrap();
        let plan = oversample_minority(&manifest, &AugmentationSpec::standard(0), "/tmp/aug").unwrap();
        assert!(plan.records.is_empty());
        assert_eq!(plan.manifest.records().len(), manifest.records().len());
    }

    #[test]
    fn empty_minority_class_is_an_error() {
        let mut manifest = synthetic_manifest(5, 0, 1);
        manifest.update(|r| r.split = Split::Train).unwrap();
        assert!(oversample_minority(&manifest, &AugmentationSpec::standard(0), "/tmp/aug").is_err());
    }

    #[test]
    fn sidecar_round_trips() {
        let records = vec![
            AugRecord {
                case_id: "c1_aug1".into(),
                source_id: "c1".into(),
                draw: AugmentDraw { flip_h: true, flip_w: false, rot_deg: 270, zoom: 1.0 },
            },
            AugRecord {
                case_id: "c2_aug1".into(),
                source_id: "c2".into(),
                draw: AugmentDraw { flip_h: false, flip_w: false, rot_deg: 0, zoom: 1.25 },
            },
        ];
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("aug.csv");
        save_aug_sidecar(&records, &path).unwrap();
        assert_eq!(load_aug_sidecar(&path).unwrap(), records);
    }

    #[test]
    fn materialized_augmentation_regenerates_bit_identically() {
        let tmp = tempfile::tempdir().unwrap();
        let spec = crate::synthdata::SynthSpec {
            n_normal: 3,
            n_pas: 1,
            size: (32, 32, 32),
            seed: 2,
            ..Default::default()
        };
        let mut manifest = crate::synthdata::generate_dataset(&spec, tmp.path()).unwrap();
        manifest.update(|r| r.split = Split::Train).unwrap();
        let aug_dir = tmp.path().join("aug");
        let plan = oversample_minority(&manifest, &AugmentationSpec::standard(9), &aug_dir).unwrap();
        materialize_augmented(&plan).unwrap();
        assert_eq!(plan.manifest.counts(Split::Train), [3, 3]);
        // regenerate from the sidecar parameters and compare bytes
        for aug in &plan.records {
            let src = plan
                .manifest
                .records()
                .iter()
                .find(|r| r.case_id == aug.source_id)
                .unwrap();
            let dst = plan
                .manifest
                .records()
                .iter()
                .find(|r| r.case_id == aug.case_id)
                .unwrap();
            let regenerated = apply_augmentation(&read_nifti(&src.path).unwrap(), &aug.draw).unwrap();
            let written = read_nifti(&dst.path).unwrap();
            assert_eq!(regenerated.data(), written.data());
        }
    }

    #[test]
    fn batches_cover_the_split_exactly() {
        let mut manifest = synthetic_manifest(11, 6, 1);
        manifest.update(|r| r.split = Split::Train).unwrap();
        let batches = make_batches(&manifest, Split::Train, 8, true, 7, 0).unwrap();
        assert_eq!(batches.len(), 3);
        assert_eq!(batches[2].len(), 1); // partial batch kept
        let mut seen: Vec<&str> = batches
            .iter()
            .flatten()
            .map(|r| r.case_id.as_str())
            .collect();
        seen.sort_unstable();
        let mut expect: Vec<&str> = manifest.records().iter().map(|r| r.case_id.as_str()).collect();
        expect.sort_unstable();
        assert_eq!(seen, expect);
    }

    #[test]
    fn batch_order_depends_on_epoch_but_not_rerun() {
        assert_eq!(epoch_order(20, true, 3, 1), epoch_order(20, true, 3, 1));
        assert_ne!(epoch_order(20, true, 3, 1), epoch_order(20, true, 3, 2));
        assert_eq!(epoch_order(5, false, 3, 1), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn missing_volume_names_the_case() {
        let manifest = synthetic_manifest(2, 1, 1);
        let records: Vec<&CaseRecord> = manifest.records().iter().collect();
        let err = load_batch(&records).unwrap_err();
        assert!(err.to_string().contains("case_0001"), "got: {err}");
    }
}
