//! Slice stacks in and probability slices out of the network.

use longiseg_core::views::{extract_edit_slice, extract_label_slice, extract_slice};
use longiseg_core::{
    assemble_input, EditSlice, InputScheme, InputStack, LabelSlice, Plane, ProbMap, ProbSlice, StackSources,
    NUM_CLASSES,
};
use longiseg_model::{Element, ModelError, Tensor};

use crate::dataset::PatientVolumes;
use crate::error::Result;

/// Previous-round information for one slice.
#[derive(Clone, Copy, Debug, Default)]
pub struct Refinement<'a, S> {
    pub prob: Option<&'a ProbSlice<S>>,
    pub labels: Option<&'a LabelSlice>,
    pub edits: Option<&'a EditSlice>,
}

/// The 8-channel stack of one slice, with the scheme's hidden channels zeroed.
pub fn slice_stack<S: Element>(
    patient: &PatientVolumes<S>,
    plane: Plane,
    index: usize,
    refinement: Refinement<'_, S>,
    scheme: InputScheme,
) -> Result<InputStack<S>> {
    let reference = extract_slice(&patient.reference, plane, index);
    let reference_seg = extract_label_slice(&patient.reference_seg, plane, index);
    let target = extract_slice(&patient.target, plane, index);
    let mut stack = assemble_input(&StackSources {
        reference: &reference,
        reference_seg: &reference_seg,
        target: &target,
        prev_prob: refinement.prob,
        prev_labels: refinement.labels,
        edits: refinement.edits,
    })?;
    stack.apply_scheme(scheme);
    Ok(stack)
}

/// Ground-truth label slice.
pub fn gt_slice<S: Element>(patient: &PatientVolumes<S>, plane: Plane, index: usize) -> Result<LabelSlice> {
    Ok(extract_label_slice(patient.ground_truth()?, plane, index))
}

pub fn edit_slice(edits: &longiseg_core::EditVolume, plane: Plane, index: usize) -> EditSlice {
    extract_edit_slice(edits, plane, index)
}

/// Packs same-sized stacks into an `[n, 8, h, w]` batch.
pub fn stacks_to_tensor<S: Element>(stacks: &[InputStack<S>]) -> Result<Tensor<S>> {
    let first = stacks
        .first()
        .ok_or_else(|| ModelError::Shape("no stacks to batch".into()))?;
    let [h, w] = first.shape();
    let c = first.channel_count();
    let mut data = Vec::with_capacity(stacks.len() * c * h * w);
    for s in stacks {
        if s.shape() != [h, w] {
            return Err(ModelError::Shape(format!("stack {:?} in a batch of {:?}", s.shape(), [h, w])).into());
        }
        data.extend_from_slice(s.as_slice());
    }
    Ok(Tensor::from_vec([stacks.len(), c, h, w], data)?)
}

/// Splits a `[n, 3, h, w]` probability batch into per-slice maps.
pub fn tensor_to_probs<S: Element>(t: &Tensor<S>) -> Result<Vec<ProbSlice<S>>> {
    let [n, c, h, w] = t.shape();
    if c != NUM_CLASSES {
        return Err(ModelError::Shape(format!("{c} output channels, expected {NUM_CLASSES}")).into());
    }
    (0..n)
        .map(|s| {
            let classes = std::array::from_fn(|k| {
                longiseg_core::Grid2::from_vec([h, w], t.plane(s, k).to_vec()).expect("positive extents")
            });
            Ok(ProbMap::new(classes)?)
        })
        .collect()
}

/// Class index per pixel of each label slice, in batch order.
pub fn labels_flat(labels: &[LabelSlice]) -> Vec<u8> {
    labels.iter().flat_map(|l| l.as_slice().iter().copied()).collect()
}
