use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {msg}")]
    Shape { op: &'static str, msg: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("time step {t} outside 1..={max}")]
    StepOutOfRange { t: usize, max: usize },

    #[error("continuous time {0} outside [0, 1]")]
    TimeOutOfRange(f64),

    #[error("ode step at alpha_bar = 1 (x = {0}) divides by zero")]
    SingularStep(f64),

    #[error("non-finite loss {value} at training step {step}")]
    NonFiniteLoss { value: f64, step: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("file truncated: {0}")]
    Truncated(String),

    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    Checksum { stored: u32, computed: u32 },

    #[error("config error at line {line}: {msg}")]
    Config { line: usize, msg: String },

    #[error("unknown verification suite `{0}`")]
    UnknownSuite(String),

    #[error("linear algebra failure: {0}")]
    Linalg(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Shape { op, msg: msg.into() }
    }
}
