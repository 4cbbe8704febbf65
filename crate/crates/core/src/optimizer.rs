//! Gradient-ascent training of the separating structure.
//!
//! Each epoch reconstructs the sources with the recurrent structure at the
//! current parameters, evaluates (or refits) the source scores on those
//! outputs, and moves the parameters along the likelihood gradient.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::likelihood::{
    gradient, log_likelihood, GradientVariant, GradientVector, LikelihoodContext,
    DEFAULT_JACOBIAN_FLOOR,
};
use crate::metrics::{align_and_score, SeparationMetrics};
use crate::model::{JacobianSignClass, MixingParams, SamplePair, SignalBatch};
use crate::recurrent::{separate_sample, RecurrenceConfig, RecurrenceStatus};
use crate::scores::{fit_kernel_score, SourceDensity};

pub type SharedDensity = Arc<dyn SourceDensity + Send + Sync>;

#[derive(Clone)]
pub enum ScoreMode {
    /// Fixed, known source densities.
    Analytic {
        first: SharedDensity,
        second: SharedDensity,
    },
    /// Spline-kernel estimate refitted on the reconstructed sources every `refit_every` epochs.
    KernelRefit {
        refit_every: usize,
        bandwidth: Option<f64>,
    },
}

impl fmt::Debug for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScoreMode::Analytic { .. } => f.write_str("Analytic"),
            ScoreMode::KernelRefit {
                refit_every,
                bandwidth,
            } => f
                .debug_struct("KernelRefit")
                .field("refit_every", refit_every)
                .field("bandwidth", bandwidth)
                .finish(),
        }
    }
}

impl Default for ScoreMode {
    fn default() -> Self {
        ScoreMode::KernelRefit {
            refit_every: 1,
            bandwidth: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub gradient_norm_tolerance: f64,
    pub score_mode: ScoreMode,
    pub gradient_variant: GradientVariant,
    pub initial_params: MixingParams,
    /// Carried into the report; training itself draws no random numbers.
    pub seed: u64,
    pub recurrence: RecurrenceConfig,
    pub jacobian_floor: f64,
    /// Halve the learning rate whenever the likelihood drops between epochs.
    pub halve_on_decrease: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.01,
            max_epochs: 500,
            gradient_norm_tolerance: 1e-6,
            score_mode: ScoreMode::default(),
            gradient_variant: GradientVariant::Corrected,
            initial_params: MixingParams::ZERO,
            seed: 0,
            recurrence: RecurrenceConfig::default(),
            jacobian_floor: DEFAULT_JACOBIAN_FLOOR,
            halve_on_decrease: false,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidParameter(
                "max_epochs must be at least 1".into(),
            ));
        }
        if !(self.gradient_norm_tolerance > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gradient norm tolerance must be positive, got {}",
                self.gradient_norm_tolerance
            )));
        }
        if !(self.jacobian_floor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "jacobian floor must be positive, got {}",
                self.jacobian_floor
            )));
        }
        if let ScoreMode::KernelRefit {
            refit_every,
            bandwidth,
        } = &self.score_mode
        {
            if *refit_every == 0 {
                return Err(Error::InvalidParameter(
                    "refit_every must be at least 1".into(),
                ));
            }
            if let Some(h) = bandwidth {
                if !(*h > 0.0 && h.is_finite()) {
                    return Err(Error::InvalidParameter(format!(
                        "bandwidth must be positive, got {h}"
                    )));
                }
            }
        }
        if !self.initial_params.is_finite() {
            return Err(Error::NonFinite("initial parameters"));
        }
        self.recurrence.validate()
    }
}

/// Outputs of the separating structure on a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    pub outputs: SignalBatch,
    /// Input index of each output row.
    pub kept: Vec<usize>,
    /// Samples recovered through the closed-form inverse after the recurrence failed.
    pub fallback: usize,
    pub dropped: usize,
}

/// Runs the recurrent structure on every sample.
///
/// Samples where the iteration does not converge are recovered with the
/// closed-form inverse when the Jacobian sign over the converged outputs is
/// constant; otherwise they are dropped.
pub fn reconstruct_batch(
    w: &MixingParams,
    x: &SignalBatch,
    cfg: &RecurrenceConfig,
) -> Result<Reconstruction> {
    cfg.validate()?;
    let mut slots: Vec<Option<SamplePair>> = Vec::with_capacity(x.len());
    let mut failed = Vec::new();
    for (i, xi) in x.iter().enumerate() {
        let r = separate_sample(w, *xi, cfg);
        if r.status == RecurrenceStatus::Converged {
            slots.push(Some(r.output));
        } else {
            slots.push(None);
            failed.push(i);
        }
    }

    let mut fallback = 0;
    if !failed.is_empty() {
        let converged: Vec<SamplePair> = slots.iter().flatten().copied().collect();
        let sign = if converged.is_empty() {
            JacobianSignClass::MixedSign
        } else {
            let (r1, r2) = SignalBatch::new(converged)?.bounding_box();
            w.classify_jacobian_sign(r1, r2)
        };
        if sign != JacobianSignClass::MixedSign {
            for &i in &failed {
                let root = w
                    .direct_inverse(x.samples()[i])
                    .and_then(|c| c.select_root(sign))
                    .ok()
                    .filter(|s| s.is_finite());
                if root.is_some() {
                    fallback += 1;
                }
                slots[i] = root;
            }
        }
    }

    let mut kept = Vec::with_capacity(x.len());
    let mut outputs = Vec::with_capacity(x.len());
    for (i, slot) in slots.into_iter().enumerate() {
        if let Some(s) = slot {
            kept.push(i);
            outputs.push(s);
        }
    }
    if outputs.is_empty() {
        return Err(Error::AllSamplesFailed);
    }
    let dropped = x.len() - outputs.len();
    Ok(Reconstruction {
        outputs: SignalBatch::new(outputs)?,
        kept,
        fallback,
        dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TrainStatus {
    Converged,
    MaxEpochs,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_params: MixingParams,
    pub epochs_run: usize,
    pub likelihood_trajectory: Vec<f64>,
    /// Sup-norm of the gradient at each epoch.
    pub gradient_norm_trajectory: Vec<f64>,
    /// Parameters at which each epoch's gradient was evaluated.
    pub param_trajectory: Vec<MixingParams>,
    pub status: TrainStatus,
    /// Samples left out across all epochs because `|J|` fell below the floor.
    pub excluded_samples: usize,
    /// Samples recovered by the closed-form fallback across all epochs.
    pub fallback_samples: usize,
    /// Samples the reconstruction could not recover, across all epochs.
    pub dropped_samples: usize,
    pub seed: u64,
    pub metrics: Option<SeparationMetrics>,
}

enum EpochScores {
    Analytic(SharedDensity, SharedDensity),
    Kernel(
        Arc<crate::scores::KernelScoreModel>,
        Arc<crate::scores::KernelScoreModel>,
    ),
}

impl EpochScores {
    fn pair(&self) -> (&dyn SourceDensity, &dyn SourceDensity) {
        match self {
            EpochScores::Analytic(a, b) => (a.as_ref(), b.as_ref()),
            EpochScores::Kernel(a, b) => (a.as_ref(), b.as_ref()),
        }
    }
}

struct EpochResult {
    likelihood: f64,
    gradient: GradientVector,
}

fn evaluate_epoch(
    w: &MixingParams,
    sources: &SignalBatch,
    scores: &EpochScores,
    cfg: &OptimizerConfig,
) -> Result<EpochResult> {
    let (d1, d2) = scores.pair();
    let ctx = LikelihoodContext::new(*w, sources, d1, d2, cfg.jacobian_floor)?;
    let likelihood = log_likelihood(&ctx, d1, d2)?;
    let gradient = gradient(&ctx, cfg.gradient_variant)?;
    Ok(EpochResult {
        likelihood,
        gradient,
    })
}

/// Trains without ground truth; `metrics` is left empty.
pub fn train(x: &SignalBatch, cfg: &OptimizerConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let mut w = cfg.initial_params;
    let mut mu = cfg.learning_rate;
    let mut report = TrainReport {
        final_params: w,
        epochs_run: 0,
        likelihood_trajectory: Vec::new(),
        gradient_norm_trajectory: Vec::new(),
        param_trajectory: Vec::new(),
        status: TrainStatus::MaxEpochs,
        excluded_samples: 0,
        fallback_samples: 0,
        dropped_samples: 0,
        seed: cfg.seed,
        metrics: None,
    };
    let mut kernel: Option<EpochScores> = None;

    for epoch in 0..cfg.max_epochs {
        let rec = match reconstruct_batch(&w, x, &cfg.recurrence) {
            Ok(r) => r,
            Err(Error::AllSamplesFailed) => {
                report.status = TrainStatus::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };
        report.fallback_samples += rec.fallback;
        report.dropped_samples += rec.dropped;

        let admissible: Vec<SamplePair> = rec
            .outputs
            .iter()
            .copied()
            .filter(|s| w.jacobian(*s).abs() >= cfg.jacobian_floor)
            .collect();
        report.excluded_samples += rec.outputs.len() - admissible.len();
        if admissible.is_empty() {
            report.status = TrainStatus::Diverged;
            break;
        }
        let sources = SignalBatch::new(admissible)?;

        let scores = match &cfg.score_mode {
            ScoreMode::Analytic { first, second } => {
                EpochScores::Analytic(first.clone(), second.clone())
            }
            ScoreMode::KernelRefit {
                refit_every,
                bandwidth,
            } => {
                if kernel.is_none() || epoch % refit_every == 0 {
                    let m1 = fit_kernel_score(&sources.first_channel(), *bandwidth)?;
                    let m2 = fit_kernel_score(&sources.second_channel(), *bandwidth)?;
                    kernel = Some(EpochScores::Kernel(Arc::new(m1), Arc::new(m2)));
                }
                match kernel.as_ref() {
                    Some(EpochScores::Kernel(a, b)) => EpochScores::Kernel(a.clone(), b.clone()),
                    _ => unreachable!("kernel scores are fitted above"),
                }
            }
        };

        let step = match evaluate_epoch(&w, &sources, &scores, cfg) {
            Ok(r) if r.likelihood.is_finite() && r.gradient.is_finite() => r,
            Ok(_) | Err(Error::NonFiniteLogDensity(_)) => {
                report.status = TrainStatus::Diverged;
                break;
            }
            Err(e) => return Err(e),
        };

        let norm = step.gradient.sup_norm();
        if cfg.halve_on_decrease {
            if let Some(&prev) = report.likelihood_trajectory.last() {
                if step.likelihood < prev {
                    mu *= 0.5;
                }
            }
        }
        report.likelihood_trajectory.push(step.likelihood);
        report.gradient_norm_trajectory.push(norm);
        report.param_trajectory.push(w);
        report.epochs_run += 1;

        if norm < cfg.gradient_norm_tolerance {
            report.status = TrainStatus::Converged;
            break;
        }
        let g = step.gradient.components();
        let next = w.to_array();
        let next: [f64; 4] = std::array::from_fn(|k| next[k] + mu * g[k]);
        if next.iter().any(|v| !v.is_finite()) {
            report.status = TrainStatus::Diverged;
            break;
        }
        w = MixingParams::from_array_unchecked(next);
    }

    report.final_params = w;
    Ok(report)
}

/// Trains, then scores the final reconstruction against the true sources.
pub fn train_with_truth(
    x: &SignalBatch,
    truth: &SignalBatch,
    cfg: &OptimizerConfig,
) -> Result<TrainReport> {
    if x.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: x.len(),
            right: truth.len(),
        });
    }
    let mut report = train(x, cfg)?;
    report.metrics = Some(score_against_truth(
        &report.final_params,
        x,
        truth,
        &cfg.recurrence,
    )?);
    Ok(report)
}

/// Reconstructs at `w` and aligns the outputs with the matching rows of `truth`.
pub fn score_against_truth(
    w: &MixingParams,
    x: &SignalBatch,
    truth: &SignalBatch,
    recurrence: &RecurrenceConfig,
) -> Result<SeparationMetrics> {
    let rec = reconstruct_batch(w, x, recurrence)?;
    let matched = SignalBatch::new(rec.kept.iter().map(|&i| truth.samples()[i]).collect())?;
    align_and_score(&rec.outputs, &matched)
}
