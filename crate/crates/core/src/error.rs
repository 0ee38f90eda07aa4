use thiserror::Error;

/// Errors produced anywhere in the library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    Layout(String),

    #[error("state (level {level}, phase {phase}) is outside the layout")]
    Index { level: usize, phase: usize },

    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),

    #[error("invalid probability vector: {0}")]
    Probability(String),

    #[error("invalid generator: {0}")]
    Generator(String),

    #[error("entropy undefined: p has mass at flat index {index} where q vanishes")]
    Support { index: usize },

    #[error("syntax error at position {position}: {message}")]
    Syntax { position: usize, message: String },

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("negative rate {rate} in block ({from_level},{to_level}) from state ({from_level},{from_phase}) to ({to_level},{to_phase})")]
    NegativeRate {
        rate: f64,
        from_level: usize,
        from_phase: usize,
        to_level: usize,
        to_phase: usize,
    },

    #[error("config error at line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("censoring failed: diagonal block of level {level} is singular")]
    Censoring { level: usize },

    #[error("factorization failed: diagonal block of level {level} is singular")]
    Factorization { level: usize },

    #[error("stationary solve failed: {0}")]
    Stationary(String),

    #[error("unstable structure: {0}")]
    Instability(String),

    #[error("no convergence after {iterations} iterations (last change {last_change:e})")]
    NonConvergence { iterations: usize, last_change: f64 },

    #[error("integration failed at t = {time}: {message}")]
    Integration { time: f64, message: String },

    #[error("simulation failed at t = {time}: {message}")]
    Simulation { time: f64, message: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
