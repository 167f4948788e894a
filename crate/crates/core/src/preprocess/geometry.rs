//! Cropping, empty-slice removal and resampling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Grid3};
use crate::scalar::Scalar;
use crate::views::Plane;
use crate::volume::{LabelMask, Volume};

/// Inclusive axis-aligned box of voxel indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoundingBox {
    pub fn shape(&self) -> [usize; 3] {
        std::array::from_fn(|a| self.max[a] - self.min[a] + 1)
    }
}

/// Tight box around the set voxels, `None` for an empty mask.
pub fn bounding_box(mask: &Grid3<bool>) -> Option<BoundingBox> {
    let mut bb: Option<BoundingBox> = None;
    for (lin, &on) in mask.as_slice().iter().enumerate() {
        if !on {
            continue;
        }
        let idx = mask.unravel(lin);
        match bb.as_mut() {
            None => bb = Some(BoundingBox { min: idx, max: idx }),
            Some(b) => {
                for a in 0..3 {
                    b.min[a] = b.min[a].min(idx[a]);
                    b.max[a] = b.max[a].max(idx[a]);
                }
            }
        }
    }
    bb
}

pub fn crop<T: Clone>(grid: &Grid3<T>, bb: &BoundingBox) -> Result<Grid3<T>> {
    let shape = grid.shape();
    if (0..3).any(|a| bb.max[a] >= shape[a] || bb.min[a] > bb.max[a]) {
        return Err(Error::InvalidArgument(format!("box {bb:?} outside grid {shape:?}")));
    }
    Ok(Grid::from_fn(bb.shape(), |[i, j, k]| {
        grid[[i + bb.min[0], j + bb.min[1], k + bb.min[2]]].clone()
    }))
}

/// Minimum max-minus-min variation for a slice to count as non-empty
/// (0.001 % of the unit intensity range).
pub const EMPTY_SLICE_VARIATION: f64 = 1e-5;

/// Indices of the slices along `plane` whose intensity variation reaches the threshold.
pub fn non_empty_slices<S: Scalar>(grid: &Grid3<S>, plane: Plane) -> Vec<usize> {
    let shape = grid.shape();
    let [rows, cols] = plane.slice_shape(shape);
    let threshold = S::lit(EMPTY_SLICE_VARIATION);
    (0..plane.slice_count(shape))
        .filter(|&index| {
            let (mut lo, mut hi) = (S::infinity(), S::neg_infinity());
            for r in 0..rows {
                for c in 0..cols {
                    let v = grid[plane.voxel(index, [r, c])];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            hi - lo >= threshold
        })
        .collect()
}

/// Keeps only the slices listed in `indices`, in that order.
pub fn select_slices<T: Clone>(grid: &Grid3<T>, plane: Plane, indices: &[usize]) -> Result<Grid3<T>> {
    if indices.is_empty() {
        return Err(Error::AllSlicesEmpty);
    }
    let mut shape = grid.shape();
    let axis = plane.normal_axis();
    if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
        return Err(Error::InvalidArgument(format!("slice index {bad} out of range")));
    }
    shape[axis] = indices.len();
    Ok(Grid::from_fn(shape, |mut idx| {
        idx[axis] = indices[idx[axis]];
        grid[idx].clone()
    }))
}

/// Removes slices with `max - min < EMPTY_SLICE_VARIATION`; returns the kept indices
/// so paired grids can be filtered the same way.
pub fn drop_empty_slices<S: Scalar>(vol: &Volume<S>, plane: Plane) -> Result<(Volume<S>, Vec<usize>)> {
    let kept = non_empty_slices(&vol.grid, plane);
    let grid = select_slices(&vol.grid, plane, &kept)?;
    let out = Volume {
        grid,
        spacing: vol.spacing,
        id: vol.id.clone(),
    };
    Ok((out, kept))
}

/// Interpolation used when resampling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    /// Trilinear interpolation.
    Image,
    /// Nearest neighbor; never creates new label values.
    Mask,
}

#[inline]
fn source_coord(dst: usize, n_in: usize, n_out: usize) -> f64 {
    let x = (dst as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5;
    x.clamp(0.0, (n_in - 1) as f64)
}

#[inline]
fn lerp<S: Scalar>(a: S, b: S, t: S) -> S {
    a + (b - a) * t
}

/// Trilinear resampling to `target`, half-pixel aligned.
pub fn resize_image<S: Scalar>(grid: &Grid3<S>, target: [usize; 3]) -> Grid3<S> {
    let shape = grid.shape();
    if shape == target {
        return grid.clone();
    }
    let axes: [Vec<(usize, usize, S)>; 3] = std::array::from_fn(|a| {
        (0..target[a])
            .map(|d| {
                let x = source_coord(d, shape[a], target[a]);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(shape[a] - 1);
                (i0, i1, S::lit(x - i0 as f64))
            })
            .collect()
    });
    Grid::from_fn(target, |[i, j, k]| {
        let (i0, i1, fi) = axes[0][i];
        let (j0, j1, fj) = axes[1][j];
        let (k0, k1, fk) = axes[2][k];
        let plane = |ii: usize| {
            let a = lerp(grid[[ii, j0, k0]], grid[[ii, j0, k1]], fk);
            let b = lerp(grid[[ii, j1, k0]], grid[[ii, j1, k1]], fk);
            lerp(a, b, fj)
        };
        lerp(plane(i0), plane(i1), fi)
    })
}

/// Nearest-neighbor resampling to `target`.
pub fn resize_nearest<T: Clone>(grid: &Grid3<T>, target: [usize; 3]) -> Grid3<T> {
    let shape = grid.shape();
    if shape == target {
        return grid.clone();
    }
    let axes: [Vec<usize>; 3] = std::array::from_fn(|a| {
        (0..target[a])
            .map(|d| (((d as f64 + 0.5) * shape[a] as f64 / target[a] as f64) as usize).min(shape[a] - 1))
            .collect()
    });
    Grid::from_fn(target, |[i, j, k]| grid[[axes[0][i], axes[1][j], axes[2][k]]].clone())
}

pub fn resize_volume<S: Scalar>(vol: &Volume<S>, target: [usize; 3]) -> Volume<S> {
    let spacing = vol
        .spacing
        .map(|sp| std::array::from_fn(|a| sp[a] * vol.shape()[a] as f64 / target[a] as f64));
    Volume {
        grid: resize_image(&vol.grid, target),
        spacing,
        id: vol.id.clone(),
    }
}

pub fn resize_labels(labels: &LabelMask<3>, target: [usize; 3]) -> LabelMask<3> {
    LabelMask::new(resize_nearest(labels.grid(), target)).expect("nearest keeps labels valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_voxel_box() {
        let mut m = Grid::filled([8, 8, 8], false);
        m[[3, 4, 5]] = true;
        let bb = bounding_box(&m).unwrap();
        assert_eq!(bb.shape(), [1, 1, 1]);
        assert_eq!(bb.min, [3, 4, 5]);
        let g = Grid::from_fn([8, 8, 8], |[i, j, k]| i * 100 + j * 10 + k);
        assert_eq!(crop(&g, &bb).unwrap().as_slice(), &[345]);
        assert!(bounding_box(&Grid::filled([2, 2, 2], false)).is_none());
    }

    #[test]
    fn empty_slice_threshold() {
        let mut g = Grid::filled([2, 2, 3], 0.5f64);
        g[[0, 0, 1]] = 0.5 + 9e-6;
        g[[0, 0, 2]] = 0.0;
        g[[1, 1, 2]] = 1.0;
        let v = Volume::new(g).unwrap();
        let (out, kept) = drop_empty_slices(&v, Plane::Axial).unwrap();
        assert_eq!(kept, vec![2]);
        assert_eq!(out.shape(), [2, 2, 1]);
        let (again, kept2) = drop_empty_slices(&out, Plane::Axial).unwrap();
        assert_eq!(kept2, vec![0]);
        assert_eq!(again, out);
    }

    #[test]
    fn all_empty_is_an_error() {
        let v = Volume::new(Grid::filled([2, 2, 2], 0.3f32)).unwrap();
        assert!(matches!(drop_empty_slices(&v, Plane::Axial), Err(Error::AllSlicesEmpty)));
    }

    #[test]
    fn identity_and_constant_resize() {
        let g = Grid::from_fn([5, 6, 7], |[i, j, k]| (i * 42 + j * 7 + k) as f32 / 210.0);
        assert_eq!(resize_image(&g, [5, 6, 7]), g);
        let c = Grid::filled([5, 6, 7], 0.37f32);
        let r = resize_image(&c, [11, 3, 9]);
        assert_eq!(r.shape(), [11, 3, 9]);
        assert!(r.as_slice().iter().all(|&v| v == 0.37));
    }

    #[test]
    fn nearest_downscale_keeps_labels() {
        let g = Grid::from_fn([8, 8, 8], |[i, j, k]| ((i + j + k) % 3) as u8);
        let r = resize_nearest(&g, [4, 4, 4]);
        assert!(r.as_slice().iter().all(|&v| v <= 2));
        assert_eq!(r.shape(), [4, 4, 4]);
    }
}
