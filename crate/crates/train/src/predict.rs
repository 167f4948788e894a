//! 2.5D volume prediction: every slice of all three planes, fused per voxel.

use longiseg_core::views::{extract_label_slice, extract_prob_slice, restack_probs};
use longiseg_core::{fuse_views, EditVolume, LabelVolume, Plane, ProbVolume};
use longiseg_model::Element;

use crate::dataset::PatientVolumes;
use crate::error::Result;
use crate::segmenter::{Pass, SliceSegmenter};
use crate::stacks::{edit_slice, slice_stack, Refinement};

/// Fused output of one round.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<S> {
    pub prob: ProbVolume<S>,
    pub labels: LabelVolume,
}

/// Per-plane probabilities before fusion.
pub fn predict_plane<S: Element>(
    segmenter: &dyn SliceSegmenter<S>,
    patient: &PatientVolumes<S>,
    plane: Plane,
    previous: Option<&Prediction<S>>,
    edits: Option<&EditVolume>,
) -> Result<ProbVolume<S>> {
    let shape = patient.shape();
    let indices: Vec<usize> = (0..plane.slice_count(shape)).collect();
    let mut stacks = Vec::with_capacity(indices.len());
    for &i in &indices {
        let prob = previous.map(|p| extract_prob_slice(&p.prob, plane, i));
        let labels = previous.map(|p| extract_label_slice(&p.labels, plane, i));
        let e = edits.map(|e| edit_slice(e, plane, i));
        let refinement = Refinement {
            prob: prob.as_ref(),
            labels: labels.as_ref(),
            edits: e.as_ref(),
        };
        stacks.push(slice_stack(patient, plane, i, refinement, segmenter.scheme())?);
    }
    let pass = if previous.is_none() && edits.is_none() {
        Pass::Initial
    } else {
        Pass::Refine
    };
    let probs = segmenter.segment(patient, plane, pass, &indices, &stacks)?;
    Ok(restack_probs(&probs, plane)?)
}

/// One refinement round. Without `previous` and `edits` this is the initial
/// prediction; otherwise the previous fused output and the accumulated edits
/// fill the refinement channels.
pub fn predict_volume<S: Element>(
    segmenter: &dyn SliceSegmenter<S>,
    patient: &PatientVolumes<S>,
    previous: Option<&Prediction<S>>,
    edits: Option<&EditVolume>,
) -> Result<Prediction<S>> {
    patient.validate()?;
    let shape = patient.shape();
    if let Some(p) = previous {
        p.labels.grid().ensure_shape("previous labels", shape)?;
        if p.prob.shape() != shape {
            return Err(longiseg_core::Error::shape("previous probabilities", &shape, &p.prob.shape()).into());
        }
    }
    if let Some(e) = edits {
        if e.shape() != shape {
            return Err(longiseg_core::Error::shape("edit volume", &shape, &e.shape()).into());
        }
    }
    let [axial, coronal, sagittal] = Plane::ALL.map(|plane| predict_plane(segmenter, patient, plane, previous, edits));
    let (prob, labels) = fuse_views(&axial?, &coronal?, &sagittal?)?;
    Ok(Prediction { prob, labels })
}
