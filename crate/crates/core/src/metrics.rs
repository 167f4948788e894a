//! Overlap and volume metrics, computed per lesion class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{LabelMask, Lesion};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn predicted(&self) -> usize {
        self.tp + self.fp
    }

    pub fn actual(&self) -> usize {
        self.tp + self.fn_
    }
}

/// Class-vs-rest voxel counts.
pub fn confusion<const D: usize>(pred: &LabelMask<D>, gt: &LabelMask<D>, lesion: Lesion) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("prediction", &gt.shape(), &pred.shape()));
    }
    let l = lesion.label();
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        match (p == l, g == l) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

/// `2TP / (2TP + FP + FN)`; 1.0 when the class is absent from both masks.
pub fn dsc(c: &ConfusionCounts) -> f64 {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

/// `TP / (TP + FP)`; 1.0 when nothing is predicted.
pub fn ppv(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fp)
}

/// `TP / (TP + FN)`; 1.0 when the ground truth is empty.
pub fn tpr(c: &ConfusionCounts) -> f64 {
    ratio(c.tp, c.tp + c.fn_)
}

/// Volume difference in percent, `100 |pred - gt| / gt`.
pub fn vd(pred_count: usize, gt_count: usize) -> Result<f64> {
    match (pred_count, gt_count) {
        (0, 0) => Ok(0.0),
        (p, 0) => Err(Error::UndefinedVolumeDifference(p)),
        (p, g) => Ok(100.0 * (p as f64 - g as f64).abs() / g as f64),
    }
}

/// All four metrics for one class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub ppv: f64,
    pub tpr: f64,
    /// `None` when the ground truth is empty but the prediction is not.
    pub vd: Option<f64>,
}

pub fn class_metrics<const D: usize>(pred: &LabelMask<D>, gt: &LabelMask<D>, lesion: Lesion) -> Result<ClassMetrics> {
    let c = confusion(pred, gt, lesion)?;
    Ok(ClassMetrics {
        dsc: dsc(&c),
        ppv: ppv(&c),
        tpr: tpr(&c),
        vd: vd(c.predicted(), c.actual()).ok(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;

    fn cc(tp: usize, fp: usize, fn_: usize) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_ }
    }

    #[test]
    fn formula_values() {
        assert!((dsc(&cc(2, 1, 1)) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(ppv(&cc(3, 1, 0)), 0.75);
        assert_eq!(ppv(&cc(3, 0, 4)), 1.0);
        assert_eq!(ppv(&cc(0, 2, 0)), 0.0);
        assert_eq!(tpr(&cc(1, 0, 3)), 0.25);
        assert_eq!(tpr(&cc(5, 2, 0)), 1.0);
        assert_eq!(tpr(&cc(0, 0, 2)), 0.0);
        assert_eq!(dsc(&cc(0, 0, 0)), 1.0);
        assert_eq!(dsc(&cc(0, 3, 4)), 0.0);
    }

    #[test]
    fn volume_difference() {
        assert_eq!(vd(150, 100).unwrap(), 50.0);
        assert_eq!(vd(100, 100).unwrap(), 0.0);
        assert_eq!(vd(0, 100).unwrap(), 100.0);
        assert_eq!(vd(0, 0).unwrap(), 0.0);
        assert!(vd(3, 0).is_err());
    }

    #[test]
    fn confusion_extremes() {
        let all = LabelMask::new(Grid::filled([2, 2, 2], 1u8)).unwrap();
        let none = LabelMask::<3>::background([2, 2, 2]);
        assert_eq!(confusion(&all, &none, Lesion::Ggo).unwrap(), cc(0, 8, 0));
        assert_eq!(confusion(&all, &all, Lesion::Ggo).unwrap(), cc(8, 0, 0));
        assert!(confusion(&all, &LabelMask::<3>::background([2, 2, 3]), Lesion::Ggo).is_err());
    }
}
