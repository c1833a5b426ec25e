use thiserror::Error;

/// State/action index pair.
pub type Pair = (usize, usize);

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid transition kernel at (s={state}, a={action}): {reason}")]
    InvalidKernel {
        state: usize,
        action: usize,
        reason: String,
    },

    #[error("invalid reward table: {0}")]
    InvalidReward(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("value iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },

    #[error("riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    RiccatiNotConverged { iterations: usize, residual: f64 },

    #[error("dataset has no samples for {} state/action pairs: {}", .0.len(), fmt_pairs(.0))]
    MissingPairs(Vec<Pair>),

    #[error("model is undefined at {} state/action pairs: {}", .0.len(), fmt_pairs(.0))]
    UndefinedModel(Vec<Pair>),

    #[error("loss became non-finite at theta = {0:?}")]
    NonFiniteLoss(Vec<f64>),

    #[error("unknown scenario `{0}` (expected battery1, battery2, lqr or random:<seed>)")]
    UnknownScenario(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::UnknownScenario(_) => 3,
            Error::Io(_) | Error::Csv(_) | Error::Json(_) => 4,
            Error::NotConverged { .. } | Error::RiccatiNotConverged { .. } => 5,
            _ => 1,
        }
    }

    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidGrid(_) => "invalid_grid",
            Error::InvalidKernel { .. } => "invalid_kernel",
            Error::InvalidReward(_) => "invalid_reward",
            Error::Shape(_) => "shape",
            Error::InvalidArgument(_) => "invalid_argument",
            Error::NotConverged { .. } => "not_converged",
            Error::RiccatiNotConverged { .. } => "riccati_not_converged",
            Error::MissingPairs(_) => "missing_pairs",
            Error::UndefinedModel(_) => "undefined_model",
            Error::NonFiniteLoss(_) => "non_finite_loss",
            Error::UnknownScenario(_) => "unknown_scenario",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

fn fmt_pairs(pairs: &[Pair]) -> String {
    const SHOWN: usize = 8;
    let mut out: Vec<String> = pairs
        .iter()
        .take(SHOWN)
        .map(|(s, a)| format!("({s},{a})"))
        .collect();
    if pairs.len() > SHOWN {
        out.push("...".to_string());
    }
    out.join(" ")
}
