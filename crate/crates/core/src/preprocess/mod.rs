//! From raw scan pairs to aligned, normalized, fixed-size volumes.
//!
//! Order of operations in [`preprocess_pair`]: crop each study to its lung box,
//! clip and normalize intensities, register the reference lung mask onto the
//! target lung mask, warp the reference volume and segmentation, drop axial
//! slices that are empty in the target (same indices for every grid), and
//! resize everything to the output shape.

mod geometry;
mod intensity;
mod registration;

pub use geometry::{
    bounding_box, crop, drop_empty_slices, non_empty_slices, resize_image, resize_labels, resize_nearest,
    resize_volume, select_slices, BoundingBox, Kind, EMPTY_SLICE_VARIATION,
};
pub use intensity::{clip_normalize, HU_MAX, HU_MIN};
pub use registration::{
    apply_deformation, register_reference, AffineBackend, DeformationField, ExternalBackend, IdentityBackend,
    RegistrationBackend, Sample,
};

use crate::error::{Error, Result};
use crate::grid::Grid3;
use crate::scalar::Scalar;
use crate::views::Plane;
use crate::volume::{LabelMask, LabelVolume, Volume};

/// Default output grid.
pub const DEFAULT_SHAPE: [usize; 3] = [150, 150, 150];

/// One scan in native intensity units with its lung mask.
#[derive(Clone, Debug)]
pub struct RawStudy<S> {
    pub raw: Grid3<S>,
    pub lung_mask: Grid3<bool>,
    pub timepoint: u32,
    pub patient_id: String,
    pub spacing: Option<[f64; 3]>,
}

impl<S: Scalar> RawStudy<S> {
    pub fn new(raw: Grid3<S>, lung_mask: Grid3<bool>, timepoint: u32, patient_id: impl Into<String>) -> Result<Self> {
        lung_mask.ensure_shape("lung mask", raw.shape())?;
        if !lung_mask.as_slice().iter().any(|&b| b) {
            return Err(Error::EmptyMask);
        }
        if timepoint == 0 {
            return Err(Error::InvalidArgument("timepoints start at 1".into()));
        }
        Ok(Self {
            raw,
            lung_mask,
            timepoint,
            patient_id: patient_id.into(),
            spacing: None,
        })
    }

    pub fn lung_box(&self) -> Result<BoundingBox> {
        bounding_box(&self.lung_mask).ok_or(Error::EmptyMask)
    }
}

/// Tight box crop around the lung mask; voxels outside the mask inside the box are kept.
pub fn crop_to_lung<S: Scalar>(raw: &RawStudy<S>) -> Result<Grid3<S>> {
    crop(&raw.raw, &raw.lung_box()?)
}

/// Aligned output of [`preprocess_pair`], all on one grid.
#[derive(Clone, Debug)]
pub struct PreparedPair<S> {
    pub reference: Volume<S>,
    pub reference_seg: LabelVolume,
    pub target: Volume<S>,
    /// Target ground truth, when one was supplied.
    pub target_seg: Option<LabelVolume>,
    pub field: DeformationField,
    /// Axial slices of the cropped target that survived the empty-slice test.
    pub kept_slices: Vec<usize>,
}

pub fn preprocess_pair<S: Scalar>(
    reference: &RawStudy<S>,
    target: &RawStudy<S>,
    reference_seg: &LabelVolume,
    target_seg: Option<&LabelVolume>,
    backend: &dyn RegistrationBackend,
    output_shape: [usize; 3],
) -> Result<PreparedPair<S>> {
    reference_seg
        .grid()
        .ensure_shape("reference segmentation", reference.raw.shape())
        .map_err(|e| e.at_stage("validate"))?;
    if let Some(ts) = target_seg {
        ts.grid()
            .ensure_shape("target segmentation", target.raw.shape())
            .map_err(|e| e.at_stage("validate"))?;
    }

    let crop_stage = |e: Error| e.at_stage("crop");
    let rbox = reference.lung_box().map_err(crop_stage)?;
    let tbox = target.lung_box().map_err(crop_stage)?;
    let ref_raw = crop(&reference.raw, &rbox).map_err(crop_stage)?;
    let ref_lung = crop(&reference.lung_mask, &rbox).map_err(crop_stage)?;
    let ref_seg = crop(reference_seg.grid(), &rbox).map_err(crop_stage)?;
    let tgt_raw = crop(&target.raw, &tbox).map_err(crop_stage)?;
    let tgt_lung = crop(&target.lung_mask, &tbox).map_err(crop_stage)?;
    let tgt_seg = target_seg
        .map(|s| crop(s.grid(), &tbox))
        .transpose()
        .map_err(crop_stage)?;

    let ref_norm = clip_normalize(&ref_raw);
    let tgt_norm = clip_normalize(&tgt_raw);

    let field = register_reference(&ref_lung, &tgt_lung, backend).map_err(|e| e.at_stage("register"))?;
    let ref_warped = apply_deformation(&ref_norm.grid, &field, Kind::Image);
    let seg_warped = apply_deformation(&ref_seg, &field, Kind::Mask);

    let drop_stage = |e: Error| e.at_stage("drop_empty_slices");
    let kept = non_empty_slices(&tgt_norm.grid, Plane::Axial);
    let ref_kept = select_slices(&ref_warped, Plane::Axial, &kept).map_err(drop_stage)?;
    let seg_kept = select_slices(&seg_warped, Plane::Axial, &kept).map_err(drop_stage)?;
    let tgt_kept = select_slices(&tgt_norm.grid, Plane::Axial, &kept).map_err(drop_stage)?;
    let tgt_seg_kept = tgt_seg
        .map(|s| select_slices(&s, Plane::Axial, &kept))
        .transpose()
        .map_err(drop_stage)?;

    let resize_stage = |e: Error| e.at_stage("resize");
    let reference_out = Volume::new(resize_image(&ref_kept, output_shape))
        .map_err(resize_stage)?
        .with_id(format!("{}-t{}", reference.patient_id, reference.timepoint));
    let target_out = Volume::new(resize_image(&tgt_kept, output_shape))
        .map_err(resize_stage)?
        .with_id(format!("{}-t{}", target.patient_id, target.timepoint));
    let reference_seg = LabelMask::new(resize_nearest(&seg_kept, output_shape)).map_err(resize_stage)?;
    let target_seg = tgt_seg_kept
        .map(|s| LabelMask::new(resize_nearest(&s, output_shape)))
        .transpose()
        .map_err(resize_stage)?;

    Ok(PreparedPair {
        reference: reference_out,
        reference_seg,
        target: target_out,
        target_seg,
        field,
        kept_slices: kept,
    })
}
