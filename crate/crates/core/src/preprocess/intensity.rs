use crate::grid::Grid3;
use crate::scalar::Scalar;
use crate::volume::Volume;

/// Lower clipping bound in Hounsfield units.
pub const HU_MIN: f64 = -1024.0;
/// Upper clipping bound in Hounsfield units.
pub const HU_MAX: f64 = 600.0;

/// Clips to `[HU_MIN, HU_MAX]` and rescales so the grid's minimum maps to 0 and
/// its maximum to 1. A constant grid maps to all zeros.
pub fn clip_normalize<S: Scalar>(grid: &Grid3<S>) -> Volume<S> {
    let (lo, hi) = (S::lit(HU_MIN), S::lit(HU_MAX));
    let clipped = grid.map(|&v| v.max(lo).min(hi));
    let (mut min, mut max) = (S::infinity(), S::neg_infinity());
    for &v in clipped.as_slice() {
        min = min.min(v);
        max = max.max(v);
    }
    let range = max - min;
    let out = if range > S::zero() {
        clipped.map(|&v| ((v - min) / range).max(S::zero()).min(S::one()))
    } else {
        clipped.map(|_| S::zero())
    };
    Volume::new(out).expect("clipped values are finite")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    #[test]
    fn endpoints_map_to_unit_interval() {
        let g = Grid::from_vec([1, 1, 4], vec![-2000.0f64, -1024.0, 0.0, 600.0]).unwrap();
        let v = clip_normalize(&g);
        assert_eq!(v.grid.as_slice()[0], 0.0);
        assert_eq!(v.grid.as_slice()[1], 0.0);
        assert_eq!(v.grid.as_slice()[3], 1.0);
        assert!((v.grid.as_slice()[2] - 1024.0 / 1624.0).abs() < 1e-12);
    }

    #[test]
    fn values_above_range_are_clipped() {
        let g = Grid::from_vec([1, 1, 3], vec![-500.0f32, 600.0, 3000.0]).unwrap();
        let v = clip_normalize(&g);
        assert_eq!(v.grid.as_slice(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn constant_grid_maps_to_zero() {
        let v = clip_normalize(&Grid::filled([2, 3, 4], 42.0f32));
        assert!(v.grid.as_slice().iter().all(|&x| x == 0.0));
    }
}
