//! Anything that turns slice stacks into class probabilities.

use longiseg_core::views::extract_label_slice;
use longiseg_core::{InputScheme, InputStack, Plane, ProbMap, ProbSlice};
use longiseg_model::{Element, Network};

use crate::dataset::PatientVolumes;
use crate::error::Result;
use crate::stacks::{stacks_to_tensor, tensor_to_probs};

/// Which kind of input a batch of stacks is: Input-1 or Input-2.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pass {
    /// Empty refinement channels.
    Initial,
    /// Previous prediction and edits filled in.
    Refine,
}

impl Pass {
    /// Batch-norm statistic bank trained on this kind of input.
    pub fn bank(self) -> usize {
        match self {
            Pass::Initial => 0,
            Pass::Refine => 1,
        }
    }
}

/// Statistic banks a network needs to keep the two passes apart.
pub const PASS_BANKS: usize = 2;

/// Per-slice segmentation backend used by volume prediction.
pub trait SliceSegmenter<S: Element>: Send + Sync {
    /// Channels this backend is allowed to see.
    fn scheme(&self) -> InputScheme;

    /// Probabilities for slices `indices` of `plane`, one per stack.
    fn segment(
        &self,
        patient: &PatientVolumes<S>,
        plane: Plane,
        pass: Pass,
        indices: &[usize],
        stacks: &[InputStack<S>],
    ) -> Result<Vec<ProbSlice<S>>>;
}

/// A trained network in evaluation mode.
pub struct NetworkSegmenter<S> {
    pub net: Network<S>,
    pub scheme: InputScheme,
    pub batch_size: usize,
}

impl<S: Element> NetworkSegmenter<S> {
    pub fn new(net: Network<S>, scheme: InputScheme) -> Self {
        Self {
            net,
            scheme,
            batch_size: 8,
        }
    }
}

impl<S: Element> SliceSegmenter<S> for NetworkSegmenter<S> {
    fn scheme(&self) -> InputScheme {
        self.scheme
    }

    fn segment(
        &self,
        _patient: &PatientVolumes<S>,
        _plane: Plane,
        pass: Pass,
        _indices: &[usize],
        stacks: &[InputStack<S>],
    ) -> Result<Vec<ProbSlice<S>>> {
        // single-bank networks use the same statistics for both passes
        let bank = pass.bank().min(self.net.stat_banks() - 1);
        let mut out = Vec::with_capacity(stacks.len());
        for chunk in stacks.chunks(self.batch_size.max(1)) {
            let probs = self.net.predict_bank(&stacks_to_tensor(chunk)?, bank)?;
            out.extend(tensor_to_probs(&probs)?);
        }
        Ok(out)
    }
}

/// Returns the one-hot ground truth; a perfect model for protocol checks.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruthSegmenter;

impl<S: Element> SliceSegmenter<S> for GroundTruthSegmenter {
    fn scheme(&self) -> InputScheme {
        InputScheme::Proposed
    }

    fn segment(
        &self,
        patient: &PatientVolumes<S>,
        plane: Plane,
        _pass: Pass,
        indices: &[usize],
        _stacks: &[InputStack<S>],
    ) -> Result<Vec<ProbSlice<S>>> {
        let gt = patient.ground_truth()?;
        Ok(indices
            .iter()
            .map(|&i| ProbMap::one_hot(&extract_label_slice(gt, plane, i)))
            .collect())
    }
}
