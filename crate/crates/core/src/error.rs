use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Domain(String),

    #[error("zone mismatch: {left} vs {right}")]
    ZoneMismatch { left: String, right: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("duplicate id `{id}` on lines {first} and {second}")]
    DuplicateId { id: String, first: usize, second: usize },

    #[error("duplicate id `{0}`")]
    DuplicateKey(String),

    #[error("mixed UTM zones: line {line} is in {found}, earlier records are in {expected}")]
    MixedZones { line: usize, expected: String, found: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("no class has at least {min_images} images ({discarded_classes} classes discarded); nothing to train on")]
    EmptyPartition { min_images: usize, discarded_classes: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("degenerate descriptor: {0}")]
    Degenerate(String),

    #[error("{0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}, iteration {iteration}: {msg}")]
    Diverged { epoch: usize, iteration: usize, msg: String },

    #[error("{0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI in front of the message.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Domain(_) => "E_DOMAIN",
            Error::ZoneMismatch { .. } => "E_ZONE_MISMATCH",
            Error::Parse { .. } => "E_PARSE",
            Error::DuplicateId { .. } | Error::DuplicateKey(_) => "E_DUPLICATE_ID",
            Error::MixedZones { .. } => "E_MIXED_ZONES",
            Error::Config(_) => "E_CONFIG",
            Error::EmptyPartition { .. } => "E_EMPTY_PARTITION",
            Error::Shape(_) => "E_SHAPE",
            Error::NonFinite(_) => "E_NON_FINITE",
            Error::Degenerate(_) => "E_DEGENERATE",
            Error::Invalid(_) => "E_INVALID",
            Error::Diverged { .. } => "E_DIVERGED",
            Error::Format(_) => "E_FORMAT",
            Error::Io(_) => "E_IO",
            Error::Json(_) => "E_JSON",
            Error::Csv(_) => "E_CSV",
        }
    }
}
