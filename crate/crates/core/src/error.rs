use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: ::image::ImageError,
    },

    #[error("manifest references missing image file {0}")]
    MissingImage(PathBuf),

    #[error("manifest count mismatch for {field}: stored {stored}, recomputed {actual}")]
    CountMismatch {
        field: &'static str,
        stored: usize,
        actual: usize,
    },

    #[error("annotation references unknown image_id {0}")]
    DanglingAnnotation(String),

    #[error("duplicate image_id {0}")]
    DuplicateImageId(String),

    #[error("malformed manifest entry: {0}")]
    MalformedEntry(String),

    #[error("archive version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("corrupt archive: {0}")]
    CorruptArchive(String),

    #[error("non-finite {term} loss: {value}")]
    NonFiniteLoss { term: &'static str, value: f64 },

    #[error("mask pyramid is missing resolution {0}")]
    MissingMaskResolution(usize),

    #[error("cannot grow past the final stage (resolution {0})")]
    FinalStage(usize),

    #[error("insufficient pool: requested {requested}, available {available} (short by {})", requested - available)]
    InsufficientPool { requested: usize, available: usize },

    #[error("exclusion list names real record {0}")]
    ExcludesRealRecord(String),

    #[error("empty pool: {0}")]
    EmptyPool(String),
}

impl Error {
    /// Stable snake_case identifier of the variant.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidInput(_) => "invalid_input",
            Error::Io { .. } => "io_error",
            Error::Json { .. } => "malformed_json",
            Error::Image { .. } => "image_codec",
            Error::MissingImage(_) => "missing_image",
            Error::CountMismatch { .. } => "count_mismatch",
            Error::DanglingAnnotation(_) => "dangling_annotation",
            Error::DuplicateImageId(_) => "duplicate_image_id",
            Error::MalformedEntry(_) => "malformed_entry",
            Error::VersionMismatch { .. } => "version_mismatch",
            Error::CorruptArchive(_) => "corrupt_archive",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::MissingMaskResolution(_) => "missing_mask_resolution",
            Error::FinalStage(_) => "final_stage",
            Error::InsufficientPool { .. } => "insufficient_pool",
            Error::ExcludesRealRecord(_) => "excludes_real_record",
            Error::EmptyPool(_) => "empty_pool",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
