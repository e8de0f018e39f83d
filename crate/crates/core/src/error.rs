use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: u32, num_classes: usize },

    #[error("confusion matrix is empty")]
    EmptyMatrix,

    #[error("label set is empty")]
    EmptyLabelSet,

    #[error("objective is not scalar (has {0} elements)")]
    NonScalarObjective(usize),

    #[error("every pixel is ignored")]
    AllIgnored,

    #[error("{0}")]
    Contamination(String),

    #[error("ragged grid: {0}")]
    RaggedGrid(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn format(offset: usize, message: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: message.into(),
        }
    }
}
