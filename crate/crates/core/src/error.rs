use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("transform spec error: {0}")]
    Spec(String),
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("complex scalars required for {0}")]
    ComplexRequired(&'static str),
    #[error("imaginary residue {residue:.3e} exceeds limit {limit:.3e}")]
    ImaginaryResidue { residue: f64, limit: f64 },
    #[error("training diverged at epoch {epoch} (loss = {loss})")]
    Divergence { epoch: usize, loss: f64 },
    #[error("dataset error: {0}")]
    Data(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
