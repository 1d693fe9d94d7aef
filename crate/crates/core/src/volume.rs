//! Canonical in-memory representation of a 3D scalar volume.
//!
//! The canonical axis order is (height, width, depth) = (rows, columns,
//! slices). In patient (LPS) terms height increases towards posterior, width
//! towards left and depth towards superior, so the first slice is the
//! inferior-most one.

use ndarray::{Array3, Axis as NdAxis};

use crate::error::{Error, Result};

/// One of the three canonical volume axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Height,
    Width,
    Depth,
}

/// Direction of one storage axis relative to the canonical convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AxisDir {
    /// Which canonical axis this storage axis runs along.
    pub axis: Axis,
    /// True when the storage axis runs opposite to the canonical direction.
    pub reversed: bool,
}

/// Axis convention currently applied to a volume's storage order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Orientation {
    /// Already in canonical (height, width, depth) order.
    Canonical,
    /// Arbitrary signed permutation of the canonical axes; entry `i`
    /// describes storage axis `i`.
    Axes([AxisDir; 3]),
    /// No usable orientation metadata; canonicalization is refused.
    Unknown,
}

impl Orientation {
    /// Classify three direction vectors in LPS patient coordinates (one per
    /// storage axis) by their dominant component.
    ///
    /// LPS: +x = left, +y = posterior, +z = superior. Canonical height is +y,
    /// width +x, depth +z.
    pub fn from_lps_directions(dirs: [[f64; 3]; 3]) -> Result<Orientation> {
        let mut axes = [AxisDir { axis: Axis::Height, reversed: false }; 3];
        for (i, d) in dirs.iter().enumerate() {
            let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            if !norm.is_finite() || norm < 1e-6 {
                return Err(Error::Orientation(format!(
                    "storage axis {i} has a degenerate direction vector {d:?}"
                )));
            }
            let (mut best, mut best_abs) = (0, 0.0);
            for (c, v) in d.iter().enumerate() {
                if v.abs() > best_abs {
                    best = c;
                    best_abs = v.abs();
                }
            }
            let axis = match best {
                0 => Axis::Width,
                1 => Axis::Height,
                _ => Axis::Depth,
            };
            axes[i] = AxisDir { axis, reversed: d[best] < 0.0 };
        }
        let orientation = Orientation::Axes(axes);
        orientation.validate()?;
        Ok(orientation)
    }

    /// LPS direction vector of each storage axis.
    pub fn lps_directions(&self) -> [[f64; 3]; 3] {
        let axes = match self {
            Orientation::Canonical => {
                [
                    AxisDir { axis: Axis::Height, reversed: false },
                    AxisDir { axis: Axis::Width, reversed: false },
                    AxisDir { axis: Axis::Depth, reversed: false },
                ]
            }
            Orientation::Axes(a) => *a,
            Orientation::Unknown => return [[0.0; 3]; 3],
        };
        let mut dirs = [[0.0; 3]; 3];
        for (i, ad) in axes.iter().enumerate() {
            let c = match ad.axis {
                Axis::Width => 0,
                Axis::Height => 1,
                Axis::Depth => 2,
            };
            dirs[i][c] = if ad.reversed { -1.0 } else { 1.0 };
        }
        dirs
    }

    /// Ensure the three storage axes cover all three canonical axes.
    pub fn validate(&self) -> Result<()> {
        if let Orientation::Axes(axes) = self {
            let mut seen = [false; 3];
            for ad in axes {
                let idx = ad.axis as usize;
                if seen[idx] {
                    return Err(Error::Orientation(format!(
                        "axes {axes:?} are not a permutation of (height, width, depth)"
                    )));
                }
                seen[idx] = true;
            }
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        match self {
            Orientation::Canonical => true,
            Orientation::Unknown => false,
            Orientation::Axes(a) => {
                a[0] == AxisDir { axis: Axis::Height, reversed: false }
                    && a[1] == AxisDir { axis: Axis::Width, reversed: false }
                    && a[2] == AxisDir { axis: Axis::Depth, reversed: false }
            }
        }
    }
}

/// A 3D scalar field with spacing metadata, indexed (height, width, depth).
#[derive(Debug, Clone)]
pub struct Volume {
    data: Array3<f32>,
    /// Physical voxel size in mm along each storage axis.
    spacing: [f64; 3],
    orientation: Orientation,
}

impl Volume {
    /// Build a volume, rejecting empty dimensions and non-finite voxels.
    pub fn new(data: Array3<f32>, spacing: [f64; 3], orientation: Orientation) -> Result<Volume> {
        let dim = data.dim();
        if dim.0 < 1 || dim.1 < 1 || dim.2 < 1 {
            return Err(Error::Format(format!("volume has an empty dimension: {dim:?}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format("volume contains NaN or Inf voxels".into()));
        }
        orientation.validate()?;
        Ok(Volume { data, spacing, orientation })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }

    /// (height, width, depth)
    pub fn shape(&self) -> (usize, usize, usize) {
        self.data.dim()
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn orientation(&self) -> Orientation {
        self.orientation
    }

    /// Permute and flip storage axes into the canonical (height, width,
    /// depth) convention. Idempotent; the voxel multiset is unchanged.
    pub fn to_canonical_orientation(&self) -> Result<Volume> {
        let axes = match self.orientation {
            Orientation::Canonical => return Ok(self.clone()),
            Orientation::Axes(a) => a,
            Orientation::Unknown => {
                return Err(Error::Orientation(
                    "volume carries no usable orientation metadata".into(),
                ))
            }
        };
        self.orientation.validate()?;

        // source storage axis and flip flag for each canonical output axis
        let mut src = [(0usize, false); 3];
        for (i, ad) in axes.iter().enumerate() {
            src[ad.axis as usize] = (i, ad.reversed);
        }

        let mut view = self.data.view();
        for &(s, rev) in &src {
            if rev {
                view.invert_axis(NdAxis(s));
            }
        }
        let permuted = view.permuted_axes([src[0].0, src[1].0, src[2].0]);
        let data = permuted.as_standard_layout().to_owned();
        let spacing = [self.spacing[src[0].0], self.spacing[src[1].0], self.spacing[src[2].0]];
        Volume::new(data, spacing, Orientation::Canonical)
    }
}

// Axis as usize: Height=0, Width=1, Depth=2 (storage order of the canonical layout).

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn seq_volume(h: usize, w: usize, d: usize, orientation: Orientation) -> Volume {
        let data = Array3::from_shape_fn((h, w, d), |(i, j, k)| (i * w * d + j * d + k) as f32);
        Volume::new(data, [1.0, 1.0, 1.0], orientation).unwrap()
    }

    #[test]
    fn canonical_volume_is_returned_unchanged() {
        let v = seq_volume(3, 4, 5, Orientation::Canonical);
        let c = v.to_canonical_orientation().unwrap();
        assert_eq!(c.data(), v.data());
        assert!(c.orientation().is_canonical());
    }

    #[test]
    fn canonicalization_is_idempotent() {
        let v = seq_volume(
            3,
            4,
            5,
            Orientation::Axes([
                AxisDir { axis: Axis::Depth, reversed: true },
                AxisDir { axis: Axis::Height, reversed: false },
                AxisDir { axis: Axis::Width, reversed: false },
            ]),
        );
        let once = v.to_canonical_orientation().unwrap();
        let twice = once.to_canonical_orientation().unwrap();
        assert_eq!(once.data(), twice.data());
    }

    #[test]
    fn depth_first_storage_is_permuted_with_count_preserved() {
        // storage (d, h, w), all axes forward
        let v = seq_volume(
            5,
            3,
            4,
            Orientation::Axes([
                AxisDir { axis: Axis::Depth, reversed: false },
                AxisDir { axis: Axis::Height, reversed: false },
                AxisDir { axis: Axis::Width, reversed: false },
            ]),
        );
        let c = v.to_canonical_orientation().unwrap();
        assert_eq!(c.shape(), (3, 4, 5));
        let mut a: Vec<f32> = v.data().iter().copied().collect();
        let mut b: Vec<f32> = c.data().iter().copied().collect();
        a.sort_by(f32::total_cmp);
        b.sort_by(f32::total_cmp);
        assert_eq!(a, b);
    }

    #[test]
    fn marker_voxel_lands_at_hand_traced_index() {
        // Storage order (w reversed, d, h): a marker at storage (0, 1, 2)
        // sits at w = (4-1)-0 = 3 (reversed axis of length 4), d = 1, h = 2,
        // so it must land at canonical (2, 3, 1) in a 3x4x5 volume.
        let mut data = Array3::zeros((4, 5, 3));
        data[[0, 1, 2]] = 9.0;
        let v = Volume::new(
            data,
            [2.0, 3.0, 1.0],
            Orientation::Axes([
                AxisDir { axis: Axis::Width, reversed: true },
                AxisDir { axis: Axis::Depth, reversed: false },
                AxisDir { axis: Axis::Height, reversed: false },
            ]),
        )
        .unwrap();
        let c = v.to_canonical_orientation().unwrap();
        assert_eq!(c.shape(), (3, 4, 5));
        assert_eq!(c.data()[[2, 3, 1]], 9.0);
        assert_eq!(c.spacing(), [1.0, 2.0, 3.0]);
    }

    #[test]
    fn duplicate_axes_are_rejected() {
        let bad = Orientation::Axes([
            AxisDir { axis: Axis::Width, reversed: false },
            AxisDir { axis: Axis::Width, reversed: true },
            AxisDir { axis: Axis::Depth, reversed: false },
        ]);
        assert!(bad.validate().is_err());
    }

    #[test]
    fn non_finite_voxels_are_rejected() {
        let mut data = Array3::zeros((2, 2, 2));
        data[[0, 0, 0]] = f32::NAN;
        assert!(Volume::new(data, [1.0; 3], Orientation::Canonical).is_err());
    }

    #[test]
    fn lps_direction_round_trip() {
        let o = Orientation::Axes([
            AxisDir { axis: Axis::Depth, reversed: true },
            AxisDir { axis: Axis::Width, reversed: false },
            AxisDir { axis: Axis::Height, reversed: false },
        ]);
        let back = Orientation::from_lps_directions(o.lps_directions()).unwrap();
        assert_eq!(back, o);
    }
}
