use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero distance between {a:?} and {b:?}")]
    ZeroDistance { a: (f64, f64), b: (f64, f64) },
    #[error("user at ({x}, {y}) is within {min} m of RRH {rrh}")]
    MinDistanceViolation { x: f64, y: f64, rrh: usize, min: f64 },
    #[error("grid placement needs a perfect-square RRH count, got {0}")]
    NonSquareN(usize),
    #[error("gave up after {0} rejected draws")]
    ExhaustedRedraws(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("dataset feature mode must be {expected}")]
    WrongFeatureMode { expected: &'static str },
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("index {index} out of range for {len} RRHs")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("config line {line}: {msg}")]
    ConfigLine { line: usize, msg: String },
    #[error("bad file format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
