//! Independent reference implementations and random fixtures for tests.
//!
//! Nothing here calls into the code under test except for plain container
//! types, so agreement between the two is meaningful.

use longiseg_core::{Grid, Grid2, Grid3, LabelMask, LabelSlice, LabelVolume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Voxel-by-voxel (tp, fp, fn) for one label.
pub fn brute_confusion(pred: &[u8], gt: &[u8], label: u8) -> (usize, usize, usize) {
    assert_eq!(pred.len(), gt.len());
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for i in 0..pred.len() {
        let p = pred[i] == label;
        let g = gt[i] == label;
        if p && g {
            tp += 1;
        } else if p {
            fp += 1;
        } else if g {
            fn_ += 1;
        }
    }
    (tp, fp, fn_)
}

/// Dice from set sizes, `2|P∩G| / (|P|+|G|)`, with two empty sets scoring 1.
pub fn set_dice(pred: &[u8], gt: &[u8], label: u8) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == label && g == label).count();
    let p = pred.iter().filter(|&&p| p == label).count();
    let g = gt.iter().filter(|&&g| g == label).count();
    if p + g == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (p + g) as f64
    }
}

pub fn set_ppv(pred: &[u8], gt: &[u8], label: u8) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == label && g == label).count();
    let p = pred.iter().filter(|&&p| p == label).count();
    if p == 0 {
        1.0
    } else {
        inter as f64 / p as f64
    }
}

pub fn set_tpr(pred: &[u8], gt: &[u8], label: u8) -> f64 {
    let inter = pred.iter().zip(gt).filter(|(&p, &g)| p == label && g == label).count();
    let g = gt.iter().filter(|&&g| g == label).count();
    if g == 0 {
        1.0
    } else {
        inter as f64 / g as f64
    }
}

struct DisjointSets {
    parent: Vec<usize>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// 8-connected components by union-find, each sorted lexicographically.
pub fn components8(mask: &Grid2<bool>) -> Vec<Vec<[usize; 2]>> {
    let [rows, cols] = mask.shape();
    let mut sets = DisjointSets::new(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            if !mask[[r, c]] {
                continue;
            }
            for (dr, dc) in [(0i64, 1i64), (1, -1), (1, 0), (1, 1)] {
                let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                if nr < rows as i64 && nc >= 0 && nc < cols as i64 && mask[[nr as usize, nc as usize]] {
                    sets.union(r * cols + c, nr as usize * cols + nc as usize);
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<[usize; 2]>> = Default::default();
    for r in 0..rows {
        for c in 0..cols {
            if mask[[r, c]] {
                groups.entry(sets.find(r * cols + c)).or_default().push([r, c]);
            }
        }
    }
    groups.into_values().collect()
}

/// An error region: class label, +1 for missed lesion or -1 for false lesion, pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OracleRegion {
    pub label: u8,
    pub sign: i8,
    pub pixels: Vec<[usize; 2]>,
}

pub fn oracle_regions(pred: &LabelSlice, gt: &LabelSlice) -> Vec<OracleRegion> {
    let mut out = Vec::new();
    for label in [1u8, 2] {
        for sign in [1i8, -1] {
            let mask = Grid::from_fn(gt.shape(), |idx| {
                let p = pred.grid()[idx] == label;
                let g = gt.grid()[idx] == label;
                if sign > 0 {
                    g && !p
                } else {
                    p && !g
                }
            });
            for pixels in components8(&mask) {
                out.push(OracleRegion { label, sign, pixels });
            }
        }
    }
    out
}

/// The `k` largest regions; ties go to the lower label, then missed before
/// false lesion, then the earlier first pixel.
pub fn oracle_topk(mut regions: Vec<OracleRegion>, k: usize) -> Vec<OracleRegion> {
    regions.sort_by(|a, b| {
        b.pixels
            .len()
            .cmp(&a.pixels.len())
            .then(a.label.cmp(&b.label))
            .then(b.sign.cmp(&a.sign))
            .then(a.pixels[0].cmp(&b.pixels[0]))
    });
    regions.truncate(k);
    regions
}

/// Value left after folding `clip(2 c + p)` over a sequence: the last nonzero entry.
pub fn last_nonzero(seq: &[i8]) -> i8 {
    seq.iter().rev().copied().find(|&v| v != 0).unwrap_or(0)
}

/// Labels with lesion-like blobs: a few random discs per class over a noisy background.
pub fn blobby_labels(rng: &mut impl Rng, shape: [usize; 2], noise: f64) -> LabelSlice {
    let [rows, cols] = shape;
    let mut g = Grid2::filled(shape, 0u8);
    for label in [1u8, 2] {
        for _ in 0..rng.random_range(0..4) {
            let cr = rng.random_range(0..rows) as f64;
            let cc = rng.random_range(0..cols) as f64;
            let rad = rng.random_range(0.5..(rows.min(cols) as f64 / 3.0).max(1.0));
            for r in 0..rows {
                for c in 0..cols {
                    if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= rad * rad {
                        g[[r, c]] = label;
                    }
                }
            }
        }
    }
    for v in g.as_mut_slice() {
        if rng.random_bool(noise) {
            *v = rng.random_range(0..3);
        }
    }
    LabelMask::new(g).unwrap()
}

/// A prediction that disagrees with `gt` on some pixels and some blobs.
pub fn perturbed_labels(rng: &mut impl Rng, gt: &LabelSlice) -> LabelSlice {
    let other = blobby_labels(rng, gt.shape(), 0.0);
    let flip = rng.random_range(0.0..0.15);
    let mut g = gt.grid().clone();
    for (v, &o) in g.as_mut_slice().iter_mut().zip(other.as_slice()) {
        if o != 0 && rng.random_bool(0.5) {
            *v = o;
        }
        if rng.random_bool(flip) {
            *v = rng.random_range(0..3);
        }
    }
    LabelMask::new(g).unwrap()
}

pub fn uniform_labels3(rng: &mut impl Rng, shape: [usize; 3]) -> LabelVolume {
    LabelMask::new(Grid3::from_fn(shape, |_| rng.random_range(0..3u8))).unwrap()
}
