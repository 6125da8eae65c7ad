use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("index {index} out of range {lo}..={hi} for {what}")]
    Index {
        what: &'static str,
        index: usize,
        lo: usize,
        hi: usize,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(&'static str),

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_index(what: &'static str, index: usize, lo: usize, hi: usize) -> Result<()> {
    if index < lo || index > hi {
        return Err(Error::Index { what, index, lo, hi });
    }
    Ok(())
}
