use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("syntax error at position {pos} near {token:?}: {msg}")]
    Syntax { pos: usize, token: String, msg: String },

    #[error("unknown identifier '{name}' at position {pos}")]
    UnknownIdentifier { name: String, pos: usize },

    #[error("function '{name}' takes 1 argument, got {got} (position {pos})")]
    Arity { name: String, got: usize, pos: usize },

    #[error("evaluation singularity: {0}")]
    Singularity(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown geometry '{0}'")]
    UnknownGeometry(String),

    #[error("unsupported family: {0}")]
    UnsupportedFamily(String),

    #[error("degenerate frame: {0}")]
    DegenerateFrame(String),

    #[error("point {0:?} lies outside the chart domain")]
    OutsideDomain(Vec<f64>),

    #[error("singular metric at {0:?}")]
    SingularMetric(Vec<f64>),

    #[error("shooting failed: {0}")]
    Shooting(String),

    #[error("tractor is not parallel: {0}")]
    NotParallel(String),

    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl Error {
    /// Process exit code used by the command line tool.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Syntax { .. }
            | Error::UnknownIdentifier { .. }
            | Error::Arity { .. }
            | Error::Validation(_)
            | Error::UnknownGeometry(_)
            | Error::UnsupportedFamily(_)
            | Error::DegenerateFrame(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
