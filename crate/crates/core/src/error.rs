//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("timestep {t} out of range [0, {max}]")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("conditional mixture is empty")]
    EmptyConditional,

    #[error("prompt selects invalid component index {index} (mixture has {count})")]
    InvalidComponent { index: usize, count: usize },

    #[error("matrix is not orthonormal (max |R^T R - I| = {defect})")]
    NotOrthonormal { defect: f64 },

    #[error("invalid timestep order: requires {requirement}, got s={s}, t={t}")]
    TimestepOrder {
        requirement: &'static str,
        s: usize,
        t: usize,
    },

    #[error("adaptive integrator diverged: {0}")]
    Divergence(String),

    #[error("timestep {t} is not aligned to the inversion interval {delta}")]
    MisalignedInterval { t: usize, delta: usize },

    #[error("trajectory needs at least 2 points, got {0}")]
    TrajectoryTooShort(usize),

    #[error("trajectory timesteps must be strictly monotone")]
    TrajectoryNotMonotone,

    #[error("non-finite gradient for particle {particle}")]
    NonFiniteGradient { particle: usize },

    #[error("particle index {index} out of range ({count} particles)")]
    ParticleOutOfRange { index: usize, count: usize },

    #[error("iteration {iter} outside run of {total} iterations")]
    IterationOutOfRange { iter: usize, total: usize },

    #[error("record too short: {rows} rows for window {window}")]
    RecordTooShort { rows: usize, window: usize },

    #[error("run aborted at iteration {iter}: {reason}")]
    RunAborted { iter: usize, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("config file {path}: {message}")]
    ConfigFile { path: String, message: String },

    #[error("serialization error: {0}")]
    Serialize(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
