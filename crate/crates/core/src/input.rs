//! Eight-channel per-slice model input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid2;
use crate::scalar::Scalar;
use crate::volume::{EditSlice, LabelSlice, Lesion, ProbSlice};

pub const INPUT_CHANNELS: usize = 8;

/// Channel layout of an [`InputStack`].
pub mod channel {
    /// Reference (earlier) slice intensities.
    pub const REFERENCE: usize = 0;
    /// Reference segmentation, GGO then CONS binary masks.
    pub const REFERENCE_SEG: [usize; 2] = [1, 2];
    /// Target (follow-up) slice intensities.
    pub const TARGET: usize = 3;
    /// Highest class probability from the previous round.
    pub const PREV_MAX_PROB: usize = 4;
    /// Previous round labels encoded as `label / 2`.
    pub const PREV_LABELS: usize = 5;
    /// Accumulated edits, GGO then CONS.
    pub const EDITS: [usize; 2] = [6, 7];
}

/// Which channels a model variant is allowed to see; hidden channels are zero-filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputScheme {
    /// Every channel.
    #[default]
    Proposed,
    /// No reference image or reference segmentation.
    StaticEdit,
    /// No previous-round prediction channels.
    LongEditRefSeg,
}

impl InputScheme {
    pub fn hidden_channels(self) -> &'static [usize] {
        match self {
            InputScheme::Proposed => &[],
            InputScheme::StaticEdit => &[channel::REFERENCE, 1, 2],
            InputScheme::LongEditRefSeg => &[channel::PREV_MAX_PROB, channel::PREV_LABELS],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            InputScheme::Proposed => "proposed",
            InputScheme::StaticEdit => "static_edit",
            InputScheme::LongEditRefSeg => "long_edit_ref_seg",
        }
    }
}

impl std::str::FromStr for InputScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "proposed" => Ok(InputScheme::Proposed),
            "static_edit" => Ok(InputScheme::StaticEdit),
            "long_edit_ref_seg" => Ok(InputScheme::LongEditRefSeg),
            other => Err(Error::InvalidArgument(format!("unknown input scheme `{other}`"))),
        }
    }
}

/// Channel-major `8 x h x w` buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct InputStack<S> {
    shape: [usize; 2],
    data: Vec<S>,
}

impl<S: Scalar> InputStack<S> {
    pub fn zeros(shape: [usize; 2]) -> Self {
        Self {
            shape,
            data: vec![S::zero(); INPUT_CHANNELS * shape[0] * shape[1]],
        }
    }

    #[inline]
    pub fn shape(&self) -> [usize; 2] {
        self.shape
    }

    #[inline]
    pub fn channel_count(&self) -> usize {
        self.data.len() / (self.shape[0] * self.shape[1])
    }

    #[inline]
    pub fn as_slice(&self) -> &[S] {
        &self.data
    }

    #[inline]
    pub fn channel(&self, c: usize) -> &[S] {
        let n = self.shape[0] * self.shape[1];
        &self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn channel_mut(&mut self, c: usize) -> &mut [S] {
        let n = self.shape[0] * self.shape[1];
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Zero-fills the channels `scheme` hides.
    pub fn apply_scheme(&mut self, scheme: InputScheme) {
        for &c in scheme.hidden_channels() {
            self.channel_mut(c).fill(S::zero());
        }
    }

    /// Checks value ranges: channels 1 to 6 in `[0, 1]`, edit channels in `{-1, 0, 1}`.
    pub fn validate(&self) -> Result<()> {
        if self.channel_count() != INPUT_CHANNELS {
            return Err(Error::shape("input channels", &[INPUT_CHANNELS], &[self.channel_count()]));
        }
        for c in 0..INPUT_CHANNELS {
            let is_edit = channel::EDITS.contains(&c);
            for (i, &v) in self.channel(c).iter().enumerate() {
                let ok = if is_edit {
                    v == S::zero() || v == S::one() || v == -S::one()
                } else {
                    v >= S::zero() && v <= S::one()
                };
                if !ok {
                    return Err(Error::InvalidArgument(format!(
                        "input channel {} holds {v} at pixel {i}",
                        c + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Everything that goes into one slice's stack. Missing previous-round
/// information is zero-filled, which gives the initial-round input.
#[derive(Clone, Copy, Debug)]
pub struct StackSources<'a, S> {
    pub reference: &'a Grid2<S>,
    pub reference_seg: &'a LabelSlice,
    pub target: &'a Grid2<S>,
    pub prev_prob: Option<&'a ProbSlice<S>>,
    pub prev_labels: Option<&'a LabelSlice>,
    pub edits: Option<&'a EditSlice>,
}

impl<'a, S> StackSources<'a, S> {
    pub fn initial(reference: &'a Grid2<S>, reference_seg: &'a LabelSlice, target: &'a Grid2<S>) -> Self {
        Self {
            reference,
            reference_seg,
            target,
            prev_prob: None,
            prev_labels: None,
            edits: None,
        }
    }
}

pub fn assemble_input<S: Scalar>(src: &StackSources<'_, S>) -> Result<InputStack<S>> {
    let shape = src.target.shape();
    src.reference.ensure_shape("reference slice", shape)?;
    src.reference_seg.grid().ensure_shape("reference segmentation", shape)?;
    if let Some(p) = src.prev_prob {
        if p.shape() != shape {
            return Err(Error::shape("previous probabilities", &shape, &p.shape()));
        }
    }
    if let Some(l) = src.prev_labels {
        l.grid().ensure_shape("previous labels", shape)?;
    }
    if let Some(e) = src.edits {
        if e.shape() != shape {
            return Err(Error::shape("edit mask", &shape, &e.shape()));
        }
    }

    let mut stack = InputStack::zeros(shape);
    stack.channel_mut(channel::REFERENCE).copy_from_slice(src.reference.as_slice());
    stack.channel_mut(channel::TARGET).copy_from_slice(src.target.as_slice());
    for lesion in Lesion::ALL {
        let l = lesion.label();
        let out = stack.channel_mut(channel::REFERENCE_SEG[lesion.channel()]);
        for (o, &v) in out.iter_mut().zip(src.reference_seg.as_slice()) {
            *o = if v == l { S::one() } else { S::zero() };
        }
    }
    if let Some(p) = src.prev_prob {
        stack.channel_mut(channel::PREV_MAX_PROB).copy_from_slice(p.max_prob().as_slice());
    }
    if let Some(l) = src.prev_labels {
        stack.channel_mut(channel::PREV_LABELS).copy_from_slice(l.encoded::<S>().as_slice());
    }
    if let Some(e) = src.edits {
        for lesion in Lesion::ALL {
            let out = stack.channel_mut(channel::EDITS[lesion.channel()]);
            for (o, &v) in out.iter_mut().zip(e.channel(lesion).as_slice()) {
                *o = S::lit(v as f64);
            }
        }
    }
    Ok(stack)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::volume::{LabelMask, ProbMap};

    fn base() -> (Grid2<f32>, LabelSlice, Grid2<f32>) {
        let r = Grid::from_fn([3, 4], |[i, j]| (i * 4 + j) as f32 / 12.0);
        let seg = LabelMask::new(Grid::from_fn([3, 4], |[i, _]| i as u8)).unwrap();
        let t = Grid::from_fn([3, 4], |[i, j]| (j * 3 + i) as f32 / 12.0);
        (r, seg, t)
    }

    #[test]
    fn initial_round_zero_fills_optional_channels() {
        let (r, seg, t) = base();
        let stack = assemble_input(&StackSources::initial(&r, &seg, &t)).unwrap();
        assert_eq!(stack.channel_count(), 8);
        for c in 4..8 {
            assert!(stack.channel(c).iter().all(|&v| v == 0.0));
        }
        assert_eq!(stack.channel(channel::REFERENCE), r.as_slice());
        assert_eq!(stack.channel(channel::TARGET), t.as_slice());
        assert_eq!(stack.channel(1)[4], 1.0);
        assert_eq!(stack.channel(2)[8], 1.0);
        stack.validate().unwrap();
    }

    #[test]
    fn previous_labels_are_encoded_over_class_count() {
        let (r, seg, t) = base();
        let bg = LabelMask::background([3, 4]);
        let cons = LabelMask::new(Grid::filled([3, 4], 2u8)).unwrap();
        let mut src = StackSources::initial(&r, &seg, &t);
        src.prev_labels = Some(&bg);
        assert!(assemble_input(&src).unwrap().channel(5).iter().all(|&v| v == 0.0));
        src.prev_labels = Some(&cons);
        assert!(assemble_input(&src).unwrap().channel(5).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn shape_error_names_offending_input() {
        let (r, seg, t) = base();
        let wrong = ProbMap::<f32, 2>::uniform([4, 4]);
        let mut src = StackSources::initial(&r, &seg, &t);
        src.prev_prob = Some(&wrong);
        let err = assemble_input(&src).unwrap_err().to_string();
        assert!(err.contains("previous probabilities"), "{err}");
    }

    #[test]
    fn static_scheme_hides_reference() {
        let (r, seg, t) = base();
        let mut stack = assemble_input(&StackSources::initial(&r, &seg, &t)).unwrap();
        stack.apply_scheme(InputScheme::StaticEdit);
        for c in 0..3 {
            assert!(stack.channel(c).iter().all(|&v| v == 0.0));
        }
        assert_eq!(stack.channel(channel::TARGET), t.as_slice());
    }
}
