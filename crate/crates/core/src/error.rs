use thiserror::Error;

pub type Result<T> = std::result::Result<T, ScrError>;

#[derive(Debug, Error)]
pub enum ScrError {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("unknown trap id(s): {}", .0.join(", "))]
    UnknownTraps(Vec<String>),

    #[error("points span {span_m:.0} m, beyond the {limit_m:.0} m limit of the local projection")]
    ExtentExceeded { span_m: f64, limit_m: f64 },

    #[error("formula error: {0}")]
    Formula(String),

    #[error("unknown covariate `{0}`")]
    UnknownCovariate(String),

    #[error("covariate `{name}` has scope {scope} which is not allowed in the {predictor} model")]
    IllegalScope {
        name: String,
        scope: String,
        predictor: String,
    },

    #[error("design matrix for {predictor} is rank deficient; collinear columns: {}", .columns.join(", "))]
    RankDeficient { predictor: String, columns: Vec<String> },

    #[error("degenerate covariate `{0}`: fewer than two distinct values")]
    DegenerateCovariate(String),

    #[error("non-finite likelihood in session {session}{}: {detail}", .individual.map(|i| format!(", individual {i}")).unwrap_or_default())]
    NonFinite {
        session: usize,
        individual: Option<usize>,
        detail: String,
    },

    #[error("expected population {0:.3e} exceeds the simulation limit of 1e7")]
    PopulationTooLarge(f64),

    #[error("no model in the catalogue was fitted successfully")]
    AllFitsFailed,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
