use thiserror::Error;

/// Errors surfaced by the game engine, memories, networks, and harness.
#[derive(Debug, Error)]
pub enum Error {
    /// A value violated a domain precondition (bad action index, empty list, out-of-range split).
    #[error("domain error: {0}")]
    Domain(String),

    /// An operation was applied out of order (stage appended with the wrong turn, incomplete trace).
    #[error("sequencing error: {0}")]
    Sequencing(String),

    /// A player callback broke the game protocol (returned an action outside the game's alphabet).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Tensor/vector dimensions did not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Training could not proceed (non-finite gradient, memory too small for retrieval).
    #[error("training error: {0}")]
    Training(String),

    /// A run was misconfigured (unknown strategy id, missing component, overlapping pools).
    #[error("configuration error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A file could not be parsed (memory dump, checkpoint, config, result table).
    #[error("parse error: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
