use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty dataset: {0}")]
    EmptyDataset(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("patient `{0}` appears in more than one split")]
    SplitOverlap(String),
    #[error("patient `{0}` has no target ground truth")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Core(#[from] longiseg_core::Error),
    #[error(transparent)]
    Model(#[from] longiseg_model::ModelError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;
