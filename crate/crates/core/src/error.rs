use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid agent type: {0}")]
    InvalidType(String),

    #[error("invalid system: {0}")]
    InvalidSpec(String),

    #[error("invalid strategy profile: {0}")]
    InvalidProfile(String),

    #[error("invalid rates: {0}")]
    InvalidRates(String),

    #[error("degenerate reference distribution: no type can ever earn money")]
    DegenerateReference,

    #[error("infeasible money supply: mean {mean} is not below the threshold capacity {capacity}")]
    Infeasible { mean: f64, capacity: f64 },

    #[error("state space too large: {0}")]
    StateSpaceTooLarge(String),

    #[error("chain is not ergodic: {0}")]
    NonErgodic(String),

    #[error("optimal policy is not a threshold policy at money level {level}")]
    NonThresholdPolicy { level: usize },

    #[error("invalid experiment config: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("toml parse error: {0}")]
    Toml(#[from] toml::de::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
