use thiserror::Error;

/// Errors raised by the solver pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("capacity exceeded: {what} needs {needed}, limit is {limit}")]
    Capacity {
        what: &'static str,
        needed: u128,
        limit: u128,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("conjugacy mismatch: max deviation {deviation:e}")]
    ConjugacyMismatch { deviation: f64 },

    #[error("singular operator: {context} (smallest singular value {sigma_min:e})")]
    Singular {
        context: String,
        sigma_min: f64,
        /// Approximate null vector in the operator's basis order, when available.
        null_vector: Option<Vec<(f64, f64)>>,
    },

    #[error("block structure contradicts resonance graph: {0}")]
    Structure(String),

    #[error("zero amplitude at tangential site {0}")]
    ZeroAmplitude(usize),

    #[error("finite-difference step too large: relative halving discrepancy {0:e}")]
    StepTooLarge(f64),

    #[error("u0 is not generic: {0}")]
    NotGeneric(String),

    #[error("excised at step {step}: {test} ({detail})")]
    Excised {
        step: usize,
        test: ExcisionTest,
        detail: String,
    },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Which test removed a parameter point from the admissible set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExcisionTest {
    BlockDeterminant,
    Diophantine,
    Divergence,
}

impl std::fmt::Display for ExcisionTest {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExcisionTest::BlockDeterminant => "block_determinant",
            ExcisionTest::Diophantine => "diophantine",
            ExcisionTest::Divergence => "divergence",
        };
        f.write_str(s)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
