//! Accumulating corrections across refinement rounds.

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::volume::EditMask;

/// `clip(2 * current + previous, -1, 1)` for one voxel.
#[inline]
pub fn accumulate_value(previous: i8, current: i8) -> i8 {
    (2 * current + previous).clamp(-1, 1)
}

/// Merges this round's edits into the running edit state. Current edits win
/// wherever they are nonzero; elsewhere earlier edits are kept.
pub fn accumulate_edits<const D: usize>(previous: &EditMask<D>, current: &EditMask<D>) -> Result<EditMask<D>> {
    if previous.shape() != current.shape() {
        return Err(Error::shape("current edit mask", &previous.shape(), &current.shape()));
    }
    let channels = std::array::from_fn(|c| {
        let (p, q) = (&previous.channels()[c], &current.channels()[c]);
        let data = p
            .as_slice()
            .iter()
            .zip(q.as_slice())
            .map(|(&a, &b)| accumulate_value(a, b))
            .collect();
        Grid::from_vec(p.shape(), data).expect("shape preserved")
    });
    EditMask::new(channels)
}
