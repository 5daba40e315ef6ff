//! Crate-wide error type with module-tagged codes.
//!
//! Every variant carries a stable `module.kind` code so CLI failures stay
//! machine-parsable: `error[data.format]: bad magic ...`. Exit codes follow
//! the usual convention: 2 for usage/config problems the caller can fix,
//! 1 for runtime failures.

use std::path::PathBuf;
use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed tensor file (bad magic, rank out of range, truncation).
    #[error("bad tensor file {path:?} at byte {offset}: {msg}")]
    TensorFormat {
        path: PathBuf,
        offset: u64,
        msg: String,
    },

    /// Filesystem failure while reading or writing an artifact.
    #[error("io failure on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Dataset manifest is missing, unreadable, or violates an invariant.
    #[error("manifest {path:?}: {msg}")]
    Manifest { path: PathBuf, msg: String },

    /// Invalid configuration (synthetic generator, training, CLI flags).
    #[error("invalid config: {0}")]
    Config(String),

    /// Invalid input handed to the transport solver.
    #[error("sinkhorn input: {0}")]
    OtInput(String),

    /// A feature row collapsed to zero norm; cosine distance is undefined.
    #[error("zero-norm {side} row {index}; cosine distance undefined")]
    ZeroNorm { side: &'static str, index: usize },

    /// Tensor shapes disagree between operands.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A gradient or loss stopped being finite; training must not continue.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Training aborted; the caller still holds the last good parameters.
    #[error("training aborted at epoch {epoch}, step {step}: {msg}")]
    TrainAbort {
        epoch: usize,
        step: usize,
        msg: String,
    },

    /// Evaluation inputs are unusable (no ground truth, mismatched checkpoints).
    #[error("eval input: {0}")]
    EvalInput(String),
}

impl Error {
    /// Stable `module.kind` tag for machine-parsable error lines.
    pub fn code(&self) -> &'static str {
        match self {
            Error::TensorFormat { .. } => "data.format",
            Error::Io { .. } => "data.io",
            Error::Manifest { .. } => "data.manifest",
            Error::Config(_) => "cli.config",
            Error::OtInput(_) => "ot.input",
            Error::ZeroNorm { .. } => "ot.zero_norm",
            Error::Shape(_) => "nn.shape",
            Error::NonFinite(_) => "nn.nonfinite",
            Error::TrainAbort { .. } => "pipeline.abort",
            Error::EvalInput(_) => "eval.input",
        }
    }

    /// Process exit code: 2 = usage/config error, 1 = runtime failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Manifest { .. } => 2,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes_are_module_tagged() {
        let e = Error::OtInput("theta does not sum to 1".into());
        assert_eq!(e.code(), "ot.input");
        assert_eq!(e.exit_code(), 1);

        let e = Error::Config("epsilon must be positive".into());
        assert_eq!(e.exit_code(), 2);
    }

    #[test]
    fn display_is_single_line() {
        let e = Error::TensorFormat {
            path: "x.dott".into(),
            offset: 0,
            msg: "bad magic".into(),
        };
        assert!(!format!("{e}").contains('\n'));
    }
}
