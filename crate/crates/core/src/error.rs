use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParamDomain(String),
    #[error("state out of domain: {0}")]
    Domain(String),
    #[error("model mismatch: {0}")]
    ModelMismatch(String),
    #[error("regime: {0}")]
    Regime(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("step size underflow at t={t}, state {state:?}")]
    Stiffness { t: f64, state: Vec<f64> },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("search failed: {0}")]
    SearchFailure(String),
    #[error("not periodic: {0}")]
    NotPeriodic(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
