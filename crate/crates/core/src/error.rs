use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("degenerate coefficients: {0}")]
    DegenerateCoefficients(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("negative discriminant {0:e}: observation lies outside the image of the mixing model")]
    NegativeDiscriminant(f64),

    #[error("degenerate inversion on channel {0}: both quadratic and linear coefficients vanish")]
    DegenerateInverse(usize),

    #[error("Jacobian changes sign over the source domain; direct structures cannot separate")]
    MixedSign,

    #[error("singular Jacobian: |J| = {value:e} is below the floor {floor:e}")]
    SingularJacobian { value: f64, floor: f64 },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("too few samples: got {got}, need at least {need}")]
    TooFewSamples { got: usize, need: usize },

    #[error("samples have zero variance")]
    ZeroVariance,

    #[error("empty signal batch")]
    EmptyBatch,

    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },

    #[error("every sample failed reconstruction")]
    AllSamplesFailed,

    #[error("non-finite log-density at sample {0}")]
    NonFiniteLogDensity(usize),

    #[error("branch crossing while perturbing parameter {parameter}: root moved by {jump:e}")]
    BranchCrossing { parameter: usize, jump: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;
