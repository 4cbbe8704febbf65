//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, keys use dotted sections:
//!
//! ```text
//! seed = 7
//! samples = 1000
//! sources.ch1 = uniform(-0.5, 0.5)
//! mixing.w = -0.2, 0.2, -0.8, 0.8
//! optimizer.learning_rate = 0.05
//! ```

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use lqbss_core::likelihood::{GradientVariant, DEFAULT_JACOBIAN_FLOOR};
use lqbss_core::optimizer::{OptimizerConfig, ScoreMode, SharedDensity};
use lqbss_core::recurrent::RecurrenceConfig;
use lqbss_core::scores::{gaussian_score, laplace_score};
use lqbss_core::MixingParams;
use rand::Rng;
use rand_distr::{Distribution, Exp1, Normal};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceDistribution {
    Uniform { lo: f64, hi: f64 },
    Gaussian { mean: f64, std: f64 },
    Laplace { mean: f64, scale: f64 },
}

impl SourceDistribution {
    pub fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            SourceDistribution::Uniform { lo, hi } => lo.is_finite() && hi.is_finite() && lo < hi,
            SourceDistribution::Gaussian { mean, std } => {
                mean.is_finite() && std.is_finite() && std > 0.0
            }
            SourceDistribution::Laplace { mean, scale } => {
                mean.is_finite() && scale.is_finite() && scale > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("invalid distribution parameters in {self}"))
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            SourceDistribution::Uniform { lo, hi } => rng.random_range(lo..hi),
            SourceDistribution::Gaussian { mean, std } => Normal::new(mean, std)
                .expect("validated parameters")
                .sample(rng),
            SourceDistribution::Laplace { mean, scale } => {
                let a: f64 = Exp1.sample(rng);
                let b: f64 = Exp1.sample(rng);
                mean + scale * (a - b)
            }
        }
    }

    /// Analytic density used for score evaluation. Uniform sources get the
    /// Gaussian with the same mean and variance, since their own score is
    /// zero inside the support and undefined outside.
    pub fn analytic_density(&self) -> lqbss_core::Result<SharedDensity> {
        Ok(match *self {
            SourceDistribution::Uniform { lo, hi } => {
                Arc::new(gaussian_score(0.5 * (lo + hi), (hi - lo) / 12f64.sqrt())?)
            }
            SourceDistribution::Gaussian { mean, std } => Arc::new(gaussian_score(mean, std)?),
            SourceDistribution::Laplace { mean, scale } => Arc::new(laplace_score(mean, scale)?),
        })
    }
}

impl std::fmt::Display for SourceDistribution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SourceDistribution::Uniform { lo, hi } => write!(f, "uniform({lo}, {hi})"),
            SourceDistribution::Gaussian { mean, std } => write!(f, "gaussian({mean}, {std})"),
            SourceDistribution::Laplace { mean, scale } => write!(f, "laplace({mean}, {scale})"),
        }
    }
}

impl FromStr for SourceDistribution {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let open = s.find('(').ok_or("expected name(a, b)")?;
        if !s.ends_with(')') {
            return Err("expected name(a, b)".into());
        }
        let name = s[..open].trim().to_ascii_lowercase();
        let args = parse_list(&s[open + 1..s.len() - 1])?;
        if args.len() != 2 {
            return Err(format!("{name} takes 2 arguments, got {}", args.len()));
        }
        let (a, b) = (args[0], args[1]);
        let d = match name.as_str() {
            "uniform" => SourceDistribution::Uniform { lo: a, hi: b },
            "gaussian" | "normal" => SourceDistribution::Gaussian { mean: a, std: b },
            "laplace" => SourceDistribution::Laplace { mean: a, scale: b },
            other => return Err(format!("unknown distribution '{other}'")),
        };
        d.validate()?;
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreChoice {
    Analytic,
    Kernel,
}

impl FromStr for ScoreChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "analytic" => Ok(ScoreChoice::Analytic),
            "kernel" => Ok(ScoreChoice::Kernel),
            other => Err(format!("expected analytic or kernel, got '{other}'")),
        }
    }
}

pub fn parse_gradient_variant(s: &str) -> Result<GradientVariant, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "corrected" => Ok(GradientVariant::Corrected),
        "legacy" => Ok(GradientVariant::Legacy),
        other => Err(format!("expected corrected or legacy, got '{other}'")),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerSettings {
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub gradient_norm_tolerance: f64,
    pub gradient_variant: GradientVariant,
    pub scores: ScoreChoice,
    pub refit_every: usize,
    pub bandwidth: Option<f64>,
    pub initial_params: MixingParams,
    pub jacobian_floor: f64,
    pub halve_on_decrease: bool,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        let core = OptimizerConfig::default();
        OptimizerSettings {
            learning_rate: core.learning_rate,
            max_epochs: core.max_epochs,
            gradient_norm_tolerance: core.gradient_norm_tolerance,
            gradient_variant: core.gradient_variant,
            scores: ScoreChoice::Kernel,
            refit_every: 1,
            bandwidth: None,
            initial_params: core.initial_params,
            jacobian_floor: DEFAULT_JACOBIAN_FLOOR,
            halve_on_decrease: core.halve_on_decrease,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckSettings {
    pub cases: usize,
    pub samples: usize,
    pub pointwise_cases: usize,
    /// Relative tolerance for the likelihood gradient.
    pub tolerance: f64,
    /// Relative tolerance for `∂s/∂w` and `∂J/∂w`. Entries just above the
    /// 1e-6 magnitude cutoff carry ~1e-11 of FD round-off, hence not 1e-6.
    pub pointwise_tolerance: f64,
    pub step: f64,
    pub linear_only: bool,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            cases: 100,
            samples: 50,
            pointwise_cases: 200,
            tolerance: 1e-5,
            pointwise_tolerance: 1e-5,
            step: 1e-6,
            linear_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub samples: usize,
    pub sources: [SourceDistribution; 2],
    pub mixing: MixingParams,
    pub optimizer: OptimizerSettings,
    pub recurrence: RecurrenceConfig,
    pub gradcheck: GradcheckSettings,
    pub figure_samples: usize,
    pub locus_points: usize,
    pub stability_grid: usize,
    pub stability_range: f64,
    pub output_dir: PathBuf,
}

pub const REFERENCE_MIXING: MixingParams = MixingParams {
    l1: -0.2,
    l2: 0.2,
    q1: -0.8,
    q2: 0.8,
};

impl Default for ExperimentConfig {
    fn default() -> Self {
        let unit = SourceDistribution::Uniform { lo: -0.5, hi: 0.5 };
        ExperimentConfig {
            seed: 0,
            samples: 1000,
            sources: [unit, unit],
            mixing: REFERENCE_MIXING,
            optimizer: OptimizerSettings::default(),
            recurrence: RecurrenceConfig::default(),
            gradcheck: GradcheckSettings::default(),
            figure_samples: 1000,
            locus_points: 200,
            stability_grid: 21,
            stability_range: 0.5,
            output_dir: PathBuf::from("."),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Parses configuration text; `origin` names the source in error messages.
    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let err = |key: &str, message: String| CliError::Config {
                path: origin.to_string(),
                line,
                key: key.to_string(),
                message,
            };
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| err(content, "expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(err(key, "duplicate key".into()));
            }
            cfg.apply(key, value).map_err(|m| err(key, m))?;
        }
        cfg.validate().map_err(|m| CliError::Config {
            path: origin.to_string(),
            line: 0,
            key: "(combined)".into(),
            message: m,
        })?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        let mut w = self.mixing.to_array();
        let mut init = self.optimizer.initial_params.to_array();
        match key {
            "seed" => self.seed = num(value)?,
            "samples" => self.samples = num(value)?,
            "sources.ch1" => self.sources[0] = value.parse()?,
            "sources.ch2" => self.sources[1] = value.parse()?,
            "mixing.w" => w = quad(value)?,
            "mixing.l1" => w[0] = num(value)?,
            "mixing.l2" => w[1] = num(value)?,
            "mixing.q1" => w[2] = num(value)?,
            "mixing.q2" => w[3] = num(value)?,
            "optimizer.learning_rate" => self.optimizer.learning_rate = num(value)?,
            "optimizer.max_epochs" => self.optimizer.max_epochs = num(value)?,
            "optimizer.gradient_norm_tolerance" => {
                self.optimizer.gradient_norm_tolerance = num(value)?
            }
            "optimizer.gradient" => {
                self.optimizer.gradient_variant = parse_gradient_variant(value)?
            }
            "optimizer.scores" => self.optimizer.scores = value.parse()?,
            "optimizer.refit_every" => self.optimizer.refit_every = num(value)?,
            "optimizer.bandwidth" => {
                self.optimizer.bandwidth = if value.eq_ignore_ascii_case("auto") {
                    None
                } else {
                    Some(num(value)?)
                }
            }
            "optimizer.initial" => init = quad(value)?,
            "optimizer.jacobian_floor" => self.optimizer.jacobian_floor = num(value)?,
            "optimizer.halve_on_decrease" => self.optimizer.halve_on_decrease = flag(value)?,
            "recurrence.max_iterations" => self.recurrence.max_iterations = num(value)?,
            "recurrence.tolerance" => self.recurrence.tolerance = num(value)?,
            "recurrence.divergence_bound" => self.recurrence.divergence_bound = num(value)?,
            "gradcheck.cases" => self.gradcheck.cases = num(value)?,
            "gradcheck.samples" => self.gradcheck.samples = num(value)?,
            "gradcheck.pointwise_cases" => self.gradcheck.pointwise_cases = num(value)?,
            "gradcheck.tolerance" => self.gradcheck.tolerance = num(value)?,
            "gradcheck.pointwise_tolerance" => self.gradcheck.pointwise_tolerance = num(value)?,
            "gradcheck.step" => self.gradcheck.step = num(value)?,
            "gradcheck.linear_only" => self.gradcheck.linear_only = flag(value)?,
            "figures.samples" => self.figure_samples = num(value)?,
            "figures.locus_points" => self.locus_points = num(value)?,
            "stability.grid" => self.stability_grid = num(value)?,
            "stability.range" => self.stability_range = num(value)?,
            "output.dir" => self.output_dir = PathBuf::from(value),
            _ => return Err("unknown key".into()),
        }
        self.mixing = MixingParams::from_array(w).map_err(|e| e.to_string())?;
        self.optimizer.initial_params =
            MixingParams::from_array(init).map_err(|e| e.to_string())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.samples == 0 {
            return Err("samples must be at least 1".into());
        }
        for d in &self.sources {
            d.validate()?;
        }
        if self.figure_samples == 0 || self.locus_points < 2 {
            return Err("figures need at least 1 sample and 2 locus points".into());
        }
        if self.stability_grid < 2 || !(self.stability_range > 0.0) {
            return Err("stability grid needs at least 2 points and a positive range".into());
        }
        let g = &self.gradcheck;
        if g.cases == 0 || g.samples == 0 || g.pointwise_cases == 0 {
            return Err("gradcheck counts must be at least 1".into());
        }
        if !(g.tolerance > 0.0 && g.pointwise_tolerance > 0.0 && g.step > 0.0) {
            return Err("gradcheck tolerances and step must be positive".into());
        }
        self.core_optimizer_with(ScoreMode::default())
            .validate()
            .map_err(|e| e.to_string())
    }

    fn core_optimizer_with(&self, score_mode: ScoreMode) -> OptimizerConfig {
        let o = &self.optimizer;
        let score_mode = match (o.scores, score_mode) {
            (ScoreChoice::Kernel, _) => ScoreMode::KernelRefit {
                refit_every: o.refit_every,
                bandwidth: o.bandwidth,
            },
            (ScoreChoice::Analytic, m) => m,
        };
        OptimizerConfig {
            learning_rate: o.learning_rate,
            max_epochs: o.max_epochs,
            gradient_norm_tolerance: o.gradient_norm_tolerance,
            score_mode,
            gradient_variant: o.gradient_variant,
            initial_params: o.initial_params,
            seed: self.seed,
            recurrence: self.recurrence,
            jacobian_floor: o.jacobian_floor,
            halve_on_decrease: o.halve_on_decrease,
        }
    }

    /// The optimizer configuration, with analytic densities taken from the source settings.
    pub fn optimizer_config(&self) -> lqbss_core::Result<OptimizerConfig> {
        let mode = ScoreMode::Analytic {
            first: self.sources[0].analytic_density()?,
            second: self.sources[1].analytic_density()?,
        };
        Ok(self.core_optimizer_with(mode))
    }
}

fn num<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse::<T>()
        .map_err(|e| format!("cannot parse '{}': {e}", s.trim()))
}

fn parse_list(s: &str) -> Result<Vec<f64>, String> {
    s.split(',').map(num::<f64>).collect()
}

fn quad(s: &str) -> Result<[f64; 4], String> {
    let v = parse_list(s)?;
    v.try_into()
        .map_err(|v: Vec<f64>| format!("expected 4 comma-separated values, got {}", v.len()))
}

fn flag(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}
