use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    Shape {
        what: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("grid must be non-empty, got shape {0:?}")]
    EmptyGrid(Vec<usize>),
    #[error("invalid label {value} at linear index {index}")]
    InvalidLabel { value: u8, index: usize },
    #[error("invalid edit value {value} at linear index {index}")]
    InvalidEdit { value: i8, index: usize },
    #[error("non-finite value at linear index {0}")]
    NonFinite(usize),
    #[error("probabilities at linear index {index} sum to {sum}")]
    NotNormalized { index: usize, sum: f64 },
    #[error("mask is empty")]
    EmptyMask,
    #[error("every slice is empty")]
    AllSlicesEmpty,
    #[error("volume difference is undefined: ground truth is empty but prediction has {0} voxels")]
    UndefinedVolumeDifference(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("registration backend `{backend}` failed: {message}")]
    Registration { backend: String, message: String },
    #[error("preprocessing stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("unsupported volume format: {0}")]
    Format(String),
    #[error("nifti: {0}")]
    Nifti(#[from] nifti::NiftiError),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn shape(what: impl Into<String>, expected: &[usize], found: &[usize]) -> Self {
        Error::Shape {
            what: what.into(),
            expected: expected.to_vec(),
            found: found.to_vec(),
        }
    }

    pub(crate) fn at_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
