use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArg(String),
    #[error("quadrature did not converge within budget (err={err:.3e}, tol={tol:.3e})")]
    QuadBudget { err: f64, tol: f64 },
    #[error("grid too coarse: {0}")]
    GridTooCoarse(String),
    #[error("grid budget exceeded: {0} samples requested")]
    GridBudget(usize),
    #[error("factorials are tabulated exactly only up to n=20, got {0}")]
    FactorialRange(u64),
    #[error("config error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
