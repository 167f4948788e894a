//! Slicing volumes along the three anatomical planes and fusing per-plane predictions.
//!
//! Volumes are stored `(h, w, s)`. An axial slice fixes `s` and has shape `[h, w]`,
//! a coronal slice fixes `h` and has shape `[w, s]`, a sagittal slice fixes `w`
//! and has shape `[h, s]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Grid, Grid2, Grid3};
use crate::scalar::Scalar;
use crate::volume::{labels_from_probs, EditMask, LabelMask, ProbMap, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Plane {
    Axial,
    Coronal,
    Sagittal,
}

impl Plane {
    pub const ALL: [Plane; 3] = [Plane::Axial, Plane::Coronal, Plane::Sagittal];

    /// Axis held fixed by slices of this plane.
    #[inline]
    pub fn normal_axis(self) -> usize {
        match self {
            Plane::Axial => 2,
            Plane::Coronal => 0,
            Plane::Sagittal => 1,
        }
    }

    pub fn slice_count(self, shape: [usize; 3]) -> usize {
        shape[self.normal_axis()]
    }

    pub fn slice_shape(self, shape: [usize; 3]) -> [usize; 2] {
        let [h, w, s] = shape;
        match self {
            Plane::Axial => [h, w],
            Plane::Coronal => [w, s],
            Plane::Sagittal => [h, s],
        }
    }

    /// Volume coordinate of in-slice position `(r, c)` on slice `index`.
    #[inline]
    pub fn voxel(self, index: usize, [r, c]: [usize; 2]) -> [usize; 3] {
        match self {
            Plane::Axial => [r, c, index],
            Plane::Coronal => [index, r, c],
            Plane::Sagittal => [r, index, c],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Plane::Axial => "axial",
            Plane::Coronal => "coronal",
            Plane::Sagittal => "sagittal",
        }
    }
}

impl std::str::FromStr for Plane {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "axial" => Ok(Plane::Axial),
            "coronal" => Ok(Plane::Coronal),
            "sagittal" => Ok(Plane::Sagittal),
            other => Err(Error::InvalidArgument(format!("unknown plane `{other}`"))),
        }
    }
}

pub fn extract_slice<T: Clone>(grid: &Grid3<T>, plane: Plane, index: usize) -> Grid2<T> {
    let shape = grid.shape();
    assert!(index < plane.slice_count(shape), "slice {index} out of range for {plane:?}");
    Grid::from_fn(plane.slice_shape(shape), |rc| grid[plane.voxel(index, rc)].clone())
}

/// All slices of `grid` along `plane`, ordered by index.
pub fn extract_slices<T: Clone>(grid: &Grid3<T>, plane: Plane) -> Vec<Grid2<T>> {
    (0..plane.slice_count(grid.shape()))
        .map(|i| extract_slice(grid, plane, i))
        .collect()
}

pub fn insert_slice<T: Clone>(grid: &mut Grid3<T>, plane: Plane, index: usize, slice: &Grid2<T>) -> Result<()> {
    let shape = grid.shape();
    slice.ensure_shape("slice", plane.slice_shape(shape))?;
    let [rows, cols] = slice.shape();
    for r in 0..rows {
        for c in 0..cols {
            grid[plane.voxel(index, [r, c])] = slice[[r, c]].clone();
        }
    }
    Ok(())
}

/// Inverse of [`extract_slices`].
pub fn restack<T: Clone>(slices: &[Grid2<T>], plane: Plane) -> Result<Grid3<T>> {
    let first = slices.first().ok_or(Error::EmptyGrid(vec![0]))?;
    let [a, b] = first.shape();
    let n = slices.len();
    let shape = match plane {
        Plane::Axial => [a, b, n],
        Plane::Coronal => [n, a, b],
        Plane::Sagittal => [a, n, b],
    };
    for s in slices {
        s.ensure_shape("slice", [a, b])?;
    }
    Ok(Grid::from_fn(shape, |[i, j, k]| match plane {
        Plane::Axial => slices[k][[i, j]].clone(),
        Plane::Coronal => slices[i][[j, k]].clone(),
        Plane::Sagittal => slices[j][[i, k]].clone(),
    }))
}

pub fn extract_label_slice(labels: &LabelMask<3>, plane: Plane, index: usize) -> LabelMask<2> {
    LabelMask::new(extract_slice(labels.grid(), plane, index)).expect("labels stay valid")
}

pub fn extract_edit_slice(edits: &EditMask<3>, plane: Plane, index: usize) -> EditMask<2> {
    let [g, c] = edits.channels();
    EditMask::new([extract_slice(g, plane, index), extract_slice(c, plane, index)]).expect("edits stay valid")
}

pub fn extract_prob_slice<S: Scalar>(prob: &ProbMap<S, 3>, plane: Plane, index: usize) -> ProbMap<S, 2> {
    ProbMap::from_channels_unchecked(std::array::from_fn(|c| extract_slice(prob.class(c), plane, index)))
}

/// Reassembles per-slice probability maps of one plane into a volume.
pub fn restack_probs<S: Scalar>(slices: &[ProbMap<S, 2>], plane: Plane) -> Result<ProbMap<S, 3>> {
    let mut classes = Vec::with_capacity(NUM_CLASSES);
    for c in 0..NUM_CLASSES {
        let per_class: Vec<Grid2<S>> = slices.iter().map(|p| p.class(c).clone()).collect();
        classes.push(restack(&per_class, plane)?);
    }
    let classes: [Grid3<S>; NUM_CLASSES] = classes.try_into().map_err(|_| Error::EmptyGrid(vec![]))?;
    Ok(ProbMap::from_channels_unchecked(classes))
}

/// Per-voxel mean of the three views' class probabilities, then argmax (ties to the lowest class).
///
/// The three values are summed in sorted order so the result is bit-identical
/// under any permutation of the arguments.
pub fn fuse_views<S: Scalar>(
    axial: &ProbMap<S, 3>,
    coronal: &ProbMap<S, 3>,
    sagittal: &ProbMap<S, 3>,
) -> Result<(ProbMap<S, 3>, LabelMask<3>)> {
    let shape = axial.shape();
    if coronal.shape() != shape {
        return Err(Error::shape("coronal probabilities", &shape, &coronal.shape()));
    }
    if sagittal.shape() != shape {
        return Err(Error::shape("sagittal probabilities", &shape, &sagittal.shape()));
    }
    let three = S::lit(3.0);
    let classes = std::array::from_fn(|c| {
        let (a, b, d) = (axial.class(c).as_slice(), coronal.class(c).as_slice(), sagittal.class(c).as_slice());
        let data = (0..a.len())
            .map(|i| {
                let mut v = [a[i], b[i], d[i]];
                v.sort_by(|x, y| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal));
                (v[0] + v[1] + v[2]) / three
            })
            .collect();
        Grid::from_vec(shape, data).expect("shape preserved")
    });
    let fused = ProbMap::from_channels_unchecked(classes);
    let (_, labels) = labels_from_probs(&fused);
    Ok((fused, labels))
}
