//! Separation of two-source linear-quadratic mixtures.
//!
//! The mixing model, its direct and recurrent inverses, source score
//! estimators, the maximum-likelihood gradient and a finite-difference
//! oracle for checking it.

pub mod error;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod oracle;
pub mod recurrent;
pub mod scores;

pub use error::{Error, Result};
pub use likelihood::{GradientVariant, GradientVector, LikelihoodContext, SensitivityMatrix};
pub use metrics::SeparationMetrics;
pub use model::{
    Interval, InverseCandidates, JacobianSignClass, MixingParams, SamplePair, SignalBatch,
};
pub use optimizer::{OptimizerConfig, ScoreMode, TrainReport, TrainStatus};
pub use oracle::{DerivativeReport, FdConfig};
pub use recurrent::{RecurrenceConfig, RecurrenceResult, RecurrenceStatus, StabilityReport};
pub use scores::{KernelScoreModel, LogDensity, ScoreEvaluator, SourceDensity};
