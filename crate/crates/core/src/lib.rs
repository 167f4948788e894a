//! Building blocks for interactive refinement of lesion segmentations on
//! longitudinal (reference + follow-up) CT pairs.
//!
//! Numeric containers are generic over the [`Scalar`] type (`f32` or `f64`);
//! the aliases at the crate root fix the common `f32` instantiations.

pub mod editsim;
pub mod edits;
pub mod error;
pub mod grid;
pub mod input;
pub mod io;
pub mod metrics;
pub mod preprocess;
pub mod scalar;
pub mod synth;
pub mod views;
pub mod volume;

pub use edits::{accumulate_edits, accumulate_value};
pub use error::{Error, Result};
pub use grid::{Grid, Grid2, Grid3};
pub use input::{assemble_input, InputScheme, InputStack, StackSources, INPUT_CHANNELS};
pub use scalar::Scalar;
pub use views::{extract_slices, fuse_views, restack, Plane};
pub use volume::{
    labels_from_probs, EditMask, EditSlice, EditVolume, LabelMask, LabelSlice, LabelVolume, Lesion, ProbMap, ProbSlice,
    ProbVolume, Volume, NUM_CLASSES, NUM_FOREGROUND,
};

pub type Volume32 = Volume<f32>;
pub type Volume64 = Volume<f64>;
pub type ProbVolume32 = ProbVolume<f32>;
pub type ProbVolume64 = ProbVolume<f64>;
pub type ProbSlice32 = ProbSlice<f32>;
pub type InputStack32 = InputStack<f32>;
pub type InputStack64 = InputStack<f64>;
