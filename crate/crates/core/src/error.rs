use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite values produced by {0}")]
    NonFinite(String),

    #[error("CFL violation: ratio c_max*dt/h = {ratio:.4} exceeds {limit:.4}")]
    Cfl { ratio: f64, limit: f64 },

    #[error("wavefield became non-finite at step {step} of shot {shot}")]
    BlowUp { shot: usize, step: usize },

    #[error("forward wavefield storage requires {required} bytes, limit is {limit} bytes")]
    Storage { required: usize, limit: usize },

    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("training diverged at epoch {epoch}: total {total:.4e} vs initial {initial:.4e}")]
    Diverged { epoch: usize, total: f64, initial: f64 },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input (configuration, arguments, files)
    /// rather than by a failure while computing.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Invalid(_) | Error::File { .. } | Error::Json(_)
        )
    }
}
