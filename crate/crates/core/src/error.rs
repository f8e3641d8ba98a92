use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown environment `{0}`")]
    UnknownEnvironment(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("invalid cmdp: {0}")]
    InvalidCmdp(String),
    #[error("undiscounted evaluation requires an episodic cmdp (gamma = 1 would diverge)")]
    NonEpisodicUndiscounted,
    #[error("action {action} is not available in state {state}")]
    InvalidAction { state: usize, action: usize },
    #[error("cost_relative risk updates require a deterministic cmdp")]
    StochasticCostRelative,
    #[error("empty proposal")]
    EmptyProposal,
    #[error("mixture weight {0} outside [0, 1]")]
    MixtureWeight(f64),
    #[error("risk {x} at state {state} is outside the policy domain")]
    DomainGap { state: usize, x: f64 },
    #[error("enumeration budget exceeded: {count} deterministic policies (limit {limit})")]
    EnumerationBudget { count: u128, limit: u128 },
    #[error("no policy meets the cost budget {0}")]
    Infeasible(f64),
    #[error("at least two samples are required, got {0}")]
    TooFewSamples(usize),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
