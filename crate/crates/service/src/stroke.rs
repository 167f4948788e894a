//! User strokes and their rasterization into edit masks.

use serde::{Deserialize, Serialize};

use longiseg_core::editsim::digital_line;
use longiseg_core::{EditVolume, Lesion, Plane};

use crate::error::{Result, ServiceError};

/// One brush stroke on one slice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stroke {
    pub plane: Plane,
    pub slice_index: usize,
    /// Lesion class label, 1 (GGO) or 2 (CONS).
    #[serde(rename = "class")]
    pub cls: u8,
    /// `+1` marks missed lesion, `-1` false lesion.
    pub polarity: i8,
    /// In-slice `[row, col]` points.
    pub polyline: Vec<[usize; 2]>,
    #[serde(default)]
    pub brush_radius: usize,
}

impl Stroke {
    pub fn lesion(&self) -> Option<Lesion> {
        Lesion::from_label(self.cls)
    }

    pub fn validate(&self, shape: [usize; 3]) -> std::result::Result<(), String> {
        if self.lesion().is_none() {
            return Err(format!("class {} is not a lesion class (1 or 2)", self.cls));
        }
        if self.polarity != 1 && self.polarity != -1 {
            return Err(format!("polarity {} is not +1 or -1", self.polarity));
        }
        let count = self.plane.slice_count(shape);
        if self.slice_index >= count {
            return Err(format!(
                "slice {} outside the {} {} slices",
                self.slice_index,
                count,
                self.plane.name()
            ));
        }
        if self.polyline.is_empty() {
            return Err("empty polyline".into());
        }
        let [rows, cols] = self.plane.slice_shape(shape);
        if let Some(p) = self.polyline.iter().find(|p| p[0] >= rows || p[1] >= cols) {
            return Err(format!("point {p:?} outside the {rows}x{cols} slice"));
        }
        Ok(())
    }

    /// In-slice pixels covered by the stroke: the digital polyline dilated by
    /// a disc of `brush_radius`, clipped to the slice. Sorted, no duplicates.
    pub fn pixels(&self, shape: [usize; 3]) -> Vec<[usize; 2]> {
        let [rows, cols] = self.plane.slice_shape(shape);
        let mut path: Vec<[usize; 2]> = if self.polyline.len() == 1 {
            self.polyline.clone()
        } else {
            self.polyline.windows(2).flat_map(|w| digital_line(w[0], w[1])).collect()
        };
        path.sort_unstable();
        path.dedup();
        let r = self.brush_radius as isize;
        if r == 0 {
            return path;
        }
        let mut out = Vec::new();
        for &[pr, pc] in &path {
            for dr in -r..=r {
                for dc in -r..=r {
                    if dr * dr + dc * dc > r * r {
                        continue;
                    }
                    let (y, x) = (pr as isize + dr, pc as isize + dc);
                    if y >= 0 && x >= 0 && (y as usize) < rows && (x as usize) < cols {
                        out.push([y as usize, x as usize]);
                    }
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }
}

/// Validates every stroke, naming the first bad one by its index.
pub fn validate_strokes(strokes: &[Stroke], shape: [usize; 3], per_slice_cap: usize) -> Result<()> {
    let mut per_slice = std::collections::HashMap::new();
    for (i, s) in strokes.iter().enumerate() {
        s.validate(shape)
            .map_err(|e| ServiceError::BadRequest(format!("stroke {i}: {e}")))?;
        let n = per_slice.entry((s.plane, s.slice_index)).or_insert(0usize);
        *n += 1;
        if *n > per_slice_cap {
            return Err(ServiceError::BadRequest(format!(
                "stroke {i}: more than {per_slice_cap} strokes on {} slice {}",
                s.plane.name(),
                s.slice_index
            )));
        }
    }
    Ok(())
}

/// The current round's edit mask. Strokes are painted in order, so a later
/// stroke overwrites an earlier one where they overlap.
pub fn rasterize_strokes(shape: [usize; 3], strokes: &[Stroke]) -> Result<EditVolume> {
    let mut edits = EditVolume::zeros(shape);
    for (i, s) in strokes.iter().enumerate() {
        s.validate(shape)
            .map_err(|e| ServiceError::BadRequest(format!("stroke {i}: {e}")))?;
        let lesion = s.lesion().expect("validated");
        for px in s.pixels(shape) {
            edits.set(lesion, s.plane.voxel(s.slice_index, px), s.polarity);
        }
    }
    Ok(edits)
}
