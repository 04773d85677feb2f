use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("{0} is not positive semi-definite")]
    NotPsd(&'static str),

    #[error("{0} is not positive definite")]
    NotPd(&'static str),

    #[error("closed loop is unstable (spectral radius {0:.6})")]
    Unstable(f64),

    #[error("Riccati iteration did not converge within {0} iterations")]
    RiccatiDivergence(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rejection sampling gave up after {0} attempts")]
    RetryCap(usize),

    #[error("no gain stabilizes every scenario")]
    Infeasible,

    #[error("K0 is not robust enough: {excluded:.4} of draws unstable, allowed {allowed:.4}")]
    NotRobust { excluded: f64, allowed: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
