use std::fmt;

use crate::latent::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(Shape, Shape),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("time {t} outside [{floor}, 1]")]
    InvalidTime { t: f64, floor: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle has no sample with nonzero prior weight")]
    EmptyDataset,

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite latent at SDE iteration {iteration}")]
    SdeNonFinite { iteration: usize },

    #[error("Langevin chain diverged at step {step}: |z| = {norm:e}")]
    Diverged { step: usize, norm: f64 },

    #[error("CFL violation at substep {substep}: max |v| * h = {travel:e} >= dx = {dx:e}")]
    Cfl { substep: usize, travel: f64, dx: f64 },

    #[error("non-finite solver state at substep {substep} ({what})")]
    SolverNonFinite { substep: usize, what: &'static str },

    #[error("particle {particle} left the simulation grid at substep {substep}")]
    OutOfGrid { particle: usize, substep: usize },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("malformed {format} data: {message}")]
    Format { format: &'static str, message: String },

    #[error("{stage}: {source}")]
    Stage {
        stage: StageTag,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Pipeline phase that produced an error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageTag {
    Config,
    Stage1,
    Stage2,
    Output,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Config => "config",
            StageTag::Stage1 => "stage1",
            StageTag::Stage2 => "stage2",
            StageTag::Output => "output",
        })
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { key: key.into(), message: message.into() }
    }

    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format { format, message: message.into() }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().display().to_string(), source }
    }

    pub(crate) fn at_stage(self, stage: StageTag) -> Self {
        match self {
            e @ Error::Stage { .. } => e,
            e => Error::Stage { stage, source: Box::new(e) },
        }
    }

    /// Strips any stage wrapper.
    pub fn root(&self) -> &Error {
        match self {
            Error::Stage { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for errors caused by bad configuration or input rather than numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self.root(),
            Error::Config { .. }
                | Error::InvalidArgument(_)
                | Error::InvalidTime { .. }
                | Error::Format { .. }
                | Error::Io { .. }
                | Error::ShapeMismatch(..)
        )
    }
}
