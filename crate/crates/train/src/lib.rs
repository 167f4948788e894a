//! Training, 2.5D volume prediction and the scripted multi-round evaluation.

pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod predict;
pub mod segmenter;
pub mod stacks;
pub mod train;

pub use dataset::{all_slices, ensure_disjoint, load_split, prepare, synthetic_split, PatientVolumes, SliceRef};
pub use error::{Result, TrainError};
pub use evaluate::{evaluate_patient, evaluate_rounds, scripted_edits, Evaluation, PatientRounds, RoundReport, SummaryRow};
pub use predict::{predict_volume, Prediction};
pub use segmenter::{GroundTruthSegmenter, NetworkSegmenter, Pass, SliceSegmenter, PASS_BANKS};
pub use train::{build_batch, train, EpochLog, TrainBatch, TrainConfig, TrainOutcome};
