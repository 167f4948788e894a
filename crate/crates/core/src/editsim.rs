//! Simulated user corrections: find wrongly segmented regions in a slice and
//! draw a line through the largest ones.

use std::cmp::Ordering;
use std::collections::{HashSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::views::Plane;
use crate::volume::{EditSlice, LabelSlice, Lesion};

/// Regions used per slice.
pub const TOP_K: usize = 5;
/// Default scribble budget per slice and round.
pub const DEFAULT_EDIT_CAP: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    /// Ground truth has the class, prediction does not (false negative).
    Under,
    /// Prediction has the class, ground truth does not (false positive).
    Over,
}

impl Polarity {
    /// Edit value written for this kind of error.
    pub fn edit_value(self) -> i8 {
        match self {
            Polarity::Under => 1,
            Polarity::Over => -1,
        }
    }
}

/// One 8-connected wrongly segmented component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ErrorRegion {
    pub lesion: Lesion,
    pub polarity: Polarity,
    /// Pixel coordinates in ascending lexicographic order.
    pub voxels: Vec<[usize; 2]>,
    pub slice_ref: Option<(Plane, usize)>,
}

impl ErrorRegion {
    #[inline]
    pub fn area(&self) -> usize {
        self.voxels.len()
    }
}

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];

/// 8-connected components of `mask`, each sorted, listed in raster order of their first pixel.
pub fn connected_components(mask: &Grid2<bool>) -> Vec<Vec<[usize; 2]>> {
    let [rows, cols] = mask.shape();
    let mut seen = vec![false; rows * cols];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..rows * cols {
        if !mask.as_slice()[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(lin) = queue.pop_front() {
            let (r, c) = (lin / cols, lin % cols);
            comp.push([r, c]);
            for (dr, dc) in NEIGHBORS8 {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                if nr < 0 || nc < 0 || nr >= rows as isize || nc >= cols as isize {
                    continue;
                }
                let n = nr as usize * cols + nc as usize;
                if mask.as_slice()[n] && !seen[n] {
                    seen[n] = true;
                    queue.push_back(n);
                }
            }
        }
        comp.sort_unstable();
        out.push(comp);
    }
    out
}

/// Under- and over-segmented components of each class, 8-connected.
pub fn error_regions(pred: &LabelSlice, gt: &LabelSlice) -> Result<Vec<ErrorRegion>> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("prediction", &gt.shape(), &pred.shape()));
    }
    let mut regions = Vec::new();
    for lesion in Lesion::ALL {
        let l = lesion.label();
        for polarity in [Polarity::Under, Polarity::Over] {
            let mask = Grid2::from_fn(gt.shape(), |idx| {
                let (p, g) = (pred.grid()[idx] == l, gt.grid()[idx] == l);
                match polarity {
                    Polarity::Under => g && !p,
                    Polarity::Over => p && !g,
                }
            });
            regions.extend(connected_components(&mask).into_iter().map(|voxels| ErrorRegion {
                lesion,
                polarity,
                voxels,
                slice_ref: None,
            }));
        }
    }
    Ok(regions)
}

/// Larger area first, then GGO before CONS, under before over, then smallest first pixel.
pub fn region_order(a: &ErrorRegion, b: &ErrorRegion) -> Ordering {
    b.area()
        .cmp(&a.area())
        .then(a.lesion.cmp(&b.lesion))
        .then(a.polarity.cmp(&b.polarity))
        .then(a.voxels.first().cmp(&b.voxels.first()))
}

/// The `k` largest regions under [`region_order`].
pub fn select_topk(mut regions: Vec<ErrorRegion>, k: usize) -> Vec<ErrorRegion> {
    regions.sort_by(region_order);
    regions.truncate(k);
    regions
}

/// Pixels of the digital line from `a` to `b`, endpoints included.
pub fn digital_line(a: [usize; 2], b: [usize; 2]) -> Vec<[usize; 2]> {
    let (mut r, mut c) = (a[0] as isize, a[1] as isize);
    let (r1, c1) = (b[0] as isize, b[1] as isize);
    let dr = (r1 - r).abs();
    let dc = -(c1 - c).abs();
    let sr = if r < r1 { 1 } else { -1 };
    let sc = if c < c1 { 1 } else { -1 };
    let mut err = dr + dc;
    let mut out = Vec::with_capacity((dr - dc + 1) as usize);
    loop {
        out.push([r as usize, c as usize]);
        if r == r1 && c == c1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dc {
            err += dc;
            r += sr;
        }
        if e2 <= dr {
            err += dr;
            c += sc;
        }
    }
    out
}

/// Region pixels with at least one 8-neighbor outside the region.
fn boundary(voxels: &[[usize; 2]], members: &HashSet<[usize; 2]>) -> Vec<[usize; 2]> {
    voxels
        .iter()
        .copied()
        .filter(|&[r, c]| {
            NEIGHBORS8.iter().any(|&(dr, dc)| {
                let (nr, nc) = (r as isize + dr, c as isize + dc);
                nr < 0 || nc < 0 || !members.contains(&[nr as usize, nc as usize])
            })
        })
        .collect()
}

/// A one-pixel-thick stroke along the region's longest chord, clipped to the region.
pub fn synthesize_scribble(region: &ErrorRegion) -> Vec<[usize; 2]> {
    match region.voxels.len() {
        0 => return Vec::new(),
        1 => return region.voxels.clone(),
        _ => {}
    }
    let members: HashSet<[usize; 2]> = region.voxels.iter().copied().collect();
    let edge = boundary(&region.voxels, &members);
    let mut best = (edge[0], edge[0]);
    let mut best_d = 0usize;
    for (i, &a) in edge.iter().enumerate() {
        for &b in &edge[i + 1..] {
            let d = a[0].abs_diff(b[0]).pow(2) + a[1].abs_diff(b[1]).pow(2);
            if d > best_d {
                best_d = d;
                best = (a, b);
            }
        }
    }
    digital_line(best.0, best.1)
        .into_iter()
        .filter(|p| members.contains(p))
        .collect()
}

/// A simulated stroke and the region it corrects.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Scribble {
    pub lesion: Lesion,
    pub polarity: Polarity,
    pub region_area: usize,
    pub voxels: Vec<[usize; 2]>,
}

/// Scribbles for the top regions of one slice, at most `cap` of them, largest region first.
pub fn simulate_scribbles(pred: &LabelSlice, gt: &LabelSlice, cap: usize) -> Result<Vec<Scribble>> {
    if cap == 0 {
        return Err(Error::InvalidArgument("edit cap must be at least 1".into()));
    }
    let regions = select_topk(error_regions(pred, gt)?, TOP_K);
    Ok(regions
        .iter()
        .take(cap)
        .map(|region| Scribble {
            lesion: region.lesion,
            polarity: region.polarity,
            region_area: region.area(),
            voxels: synthesize_scribble(region),
        })
        .collect())
}

pub fn rasterize_scribbles(shape: [usize; 2], scribbles: &[Scribble]) -> EditSlice {
    let mut edits = EditSlice::zeros(shape);
    for s in scribbles {
        for &p in &s.voxels {
            edits.set(s.lesion, p, s.polarity.edit_value());
        }
    }
    edits
}

/// Edit mask a scripted user would draw on this slice: `+1` along strokes on
/// missed lesion, `-1` along strokes on false lesion, per class channel.
pub fn simulate_edits(pred: &LabelSlice, gt: &LabelSlice, cap: usize) -> Result<EditSlice> {
    let scribbles = simulate_scribbles(pred, gt, cap)?;
    Ok(rasterize_scribbles(gt.shape(), &scribbles))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::LabelMask;

    fn labels(rows: &[&str]) -> LabelSlice {
        let r = rows.len();
        let c = rows[0].len();
        let data = rows.iter().flat_map(|s| s.bytes().map(|b| b - b'0')).collect();
        LabelMask::new(Grid2::from_vec([r, c], data).unwrap()).unwrap()
    }

    #[test]
    fn identical_masks_have_no_errors() {
        let a = labels(&["0120", "1102"]);
        assert!(error_regions(&a, &a).unwrap().is_empty());
        assert!(simulate_edits(&a, &a, 3).unwrap().is_zero());
    }

    #[test]
    fn missed_square_is_one_under_region() {
        let gt = labels(&["00000", "01110", "01110", "01110", "00000"]);
        let pred = LabelMask::background([5, 5]);
        let regions = error_regions(&pred, &gt).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].lesion, Lesion::Ggo);
        assert_eq!(regions[0].polarity, Polarity::Under);
        assert_eq!(regions[0].area(), 9);
    }

    #[test]
    fn diagonal_pixels_join_under_eight_connectivity() {
        let gt = labels(&["100", "010", "001"]);
        let regions = error_regions(&LabelMask::background([3, 3]), &gt).unwrap();
        assert_eq!(regions.len(), 1);
        assert_eq!(regions[0].area(), 3);
    }

    #[test]
    fn scribble_degenerate_and_collinear() {
        let single = ErrorRegion {
            lesion: Lesion::Ggo,
            polarity: Polarity::Under,
            voxels: vec![[2, 3]],
            slice_ref: None,
        };
        assert_eq!(synthesize_scribble(&single), vec![[2, 3]]);
        let strip = ErrorRegion {
            voxels: (0..7).map(|c| [4, c]).collect(),
            ..single
        };
        let mut line = synthesize_scribble(&strip);
        line.sort();
        assert_eq!(line, strip.voxels);
    }

    #[test]
    fn topk_keeps_everything_when_few() {
        let gt = labels(&["1000", "0002", "2000"]);
        let regions = error_regions(&LabelMask::background([3, 4]), &gt).unwrap();
        assert_eq!(regions.len(), 3);
        assert_eq!(select_topk(regions, 5).len(), 3);
        assert!(select_topk(Vec::new(), 5).is_empty());
    }

    #[test]
    fn single_cons_region_edits_only_channel_two() {
        let gt = labels(&["0000", "0220", "0220"]);
        let edits = simulate_edits(&LabelMask::background([3, 4]), &gt, 20).unwrap();
        assert!(edits.channel(Lesion::Ggo).as_slice().iter().all(|&v| v == 0));
        let cons = edits.channel(Lesion::Cons);
        assert!(cons.as_slice().iter().any(|&v| v == 1));
        for (i, &v) in cons.as_slice().iter().enumerate() {
            if v != 0 {
                assert_eq!(v, 1);
                assert_eq!(gt.as_slice()[i], 2);
            }
        }
    }

    #[test]
    fn over_segmentation_writes_minus_one() {
        let pred = labels(&["11", "11"]);
        let gt = LabelMask::background([2, 2]);
        let edits = simulate_edits(&pred, &gt, 1).unwrap();
        assert!(edits.channel(Lesion::Ggo).as_slice().contains(&-1));
        assert!(!edits.channel(Lesion::Ggo).as_slice().contains(&1));
    }

    #[test]
    fn only_five_largest_regions_get_scribbles() {
        // seven isolated single-row segments of decreasing length
        let gt = labels(&[
            "1111111011111100",
            "0000000000000000",
            "1111100111100000",
            "0000000000000000",
            "1110011000000000",
            "0000000000000000",
            "1000000000000000",
        ]);
        let pred = LabelMask::background(gt.shape());
        let scribbles = simulate_scribbles(&pred, &gt, 20).unwrap();
        let areas: Vec<usize> = scribbles.iter().map(|s| s.region_area).collect();
        assert_eq!(areas, vec![7, 6, 5, 4, 3]);
        let edits = simulate_edits(&pred, &gt, 20).unwrap();
        assert_eq!(edits.channel(Lesion::Ggo)[[4, 5]], 0);
        assert_eq!(edits.channel(Lesion::Ggo)[[6, 0]], 0);
    }

    #[test]
    fn cap_limits_scribbles() {
        let gt = labels(&["10101", "00000", "10101"]);
        let pred = LabelMask::background(gt.shape());
        assert_eq!(simulate_scribbles(&pred, &gt, 2).unwrap().len(), 2);
        assert!(simulate_scribbles(&pred, &gt, 0).is_err());
    }
}
