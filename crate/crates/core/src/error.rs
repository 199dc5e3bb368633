use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error in {source_name} at {location}: {message}")]
    Parse {
        source_name: String,
        location: String,
        message: String,
    },

    #[error("numerical blowup at cell ({row}, {col}){}", step_suffix(*.step))]
    Blowup {
        row: usize,
        col: usize,
        step: Option<usize>,
    },

    #[error("jacobian estimation failed: {0}")]
    Estimation(String),

    #[error("system identification failed at step {step}: {message}")]
    Identification { step: usize, message: String },

    #[error("riccati recursion failed at step {step}: {message}")]
    Riccati { step: usize, message: String },

    #[error("optimization stalled after {} iterations without an accepted pass", .history.len())]
    Stalled { history: Vec<f64> },

    #[error("mpc replanning failed at outer step {step}: {inner}")]
    Replan { step: usize, inner: Box<Error> },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn step_suffix(step: Option<usize>) -> String {
    step.map(|s| format!(" during step {s}")).unwrap_or_default()
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a timestep index to a blowup error; other variants pass through.
    pub fn at_step(self, step: usize) -> Self {
        match self {
            Error::Blowup { row, col, .. } => Error::Blowup {
                row,
                col,
                step: Some(step),
            },
            other => other,
        }
    }

    /// True for failures caused by the numerics rather than by bad input.
    pub fn is_numerical(&self) -> bool {
        match self {
            Error::Blowup { .. }
            | Error::Estimation(_)
            | Error::Identification { .. }
            | Error::Riccati { .. }
            | Error::Stalled { .. } => true,
            Error::Replan { inner, .. } => inner.is_numerical(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
