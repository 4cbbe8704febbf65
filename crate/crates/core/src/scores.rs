//! Score functions `ψ(u) = -d/du log f(u)`.
//!
//! Analytic evaluators cover the Gaussian and Laplace families. The
//! nonparametric estimator is a kernel density estimate built on the cubic
//! cardinal B-spline, binned onto a uniform knot grid so that evaluation
//! touches a fixed number of knots.

use crate::error::{Error, Result};
use crate::model::Interval;

/// Minimum sample count accepted by [`fit_kernel_score`].
pub const MIN_KERNEL_SAMPLES: usize = 10;

/// Densities below this fraction of the peak are floored before dividing.
pub const DENSITY_FLOOR_RATIO: f64 = 1e-8;

/// Knots per bandwidth on the binning grid.
const KNOTS_PER_BANDWIDTH: usize = 4;

const MAX_KNOTS: usize = 1 << 22;

pub trait ScoreEvaluator {
    fn score(&self, u: f64) -> f64;
}

pub trait LogDensity {
    fn log_density(&self, u: f64) -> f64;
}

/// A density that provides both its log-pdf and its score.
pub trait SourceDensity: ScoreEvaluator + LogDensity {}

impl<T: ScoreEvaluator + LogDensity + ?Sized> SourceDensity for T {}

/// Evaluates any score evaluator at `u`.
pub fn eval_score(model: &(impl ScoreEvaluator + ?Sized), u: f64) -> f64 {
    model.score(u)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianScore {
    pub mean: f64,
    pub std: f64,
}

pub fn gaussian_score(mean: f64, std: f64) -> Result<GaussianScore> {
    if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "gaussian needs finite mean and std > 0, got mean={mean}, std={std}"
        )));
    }
    Ok(GaussianScore { mean, std })
}

impl ScoreEvaluator for GaussianScore {
    fn score(&self, u: f64) -> f64 {
        (u - self.mean) / (self.std * self.std)
    }
}

impl LogDensity for GaussianScore {
    fn log_density(&self, u: f64) -> f64 {
        let z = (u - self.mean) / self.std;
        -0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

/// Laplace density `exp(-|u - mean| / scale) / (2 scale)`. Its score is the
/// sign function scaled by `1/scale`, taken as zero at the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LaplaceScore {
    pub mean: f64,
    pub scale: f64,
}

pub fn laplace_score(mean: f64, scale: f64) -> Result<LaplaceScore> {
    if !(scale > 0.0) || !scale.is_finite() || !mean.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "laplace needs finite mean and scale > 0, got mean={mean}, scale={scale}"
        )));
    }
    Ok(LaplaceScore { mean, scale })
}

impl ScoreEvaluator for LaplaceScore {
    fn score(&self, u: f64) -> f64 {
        let d = u - self.mean;
        if d == 0.0 {
            0.0
        } else {
            d.signum() / self.scale
        }
    }
}

impl LogDensity for LaplaceScore {
    fn log_density(&self, u: f64) -> f64 {
        -(u - self.mean).abs() / self.scale - (2.0 * self.scale).ln()
    }
}

/// Improper flat density: zero score and zero log-density everywhere.
///
/// Leaves only the Jacobian term in the likelihood and its gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlatDensity;

impl ScoreEvaluator for FlatDensity {
    fn score(&self, _u: f64) -> f64 {
        0.0
    }
}

impl LogDensity for FlatDensity {
    fn log_density(&self, _u: f64) -> f64 {
        0.0
    }
}

/// Cubic cardinal B-spline on `[-2, 2]`; integrates to one.
pub fn cubic_bspline(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        2.0 / 3.0 - a * a + 0.5 * a * a * a
    } else if a < 2.0 {
        let r = 2.0 - a;
        r * r * r / 6.0
    } else {
        0.0
    }
}

pub fn cubic_bspline_derivative(t: f64) -> f64 {
    let a = t.abs();
    if a < 1.0 {
        -2.0 * t + 1.5 * t * a
    } else if a < 2.0 {
        let r = 2.0 - a;
        -0.5 * t.signum() * r * r
    } else {
        0.0
    }
}

/// Kernel score estimate fitted on a sample.
///
/// The density is `f(u) = Σ_k c_k B((u - g_k) / h)` with `B` the cubic
/// B-spline, `g_k` a uniform knot grid spanning the sample range and `c_k`
/// the linearly binned sample weights scaled by `1 / (N h)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelScoreModel {
    knots: Vec<f64>,
    coefficients: Vec<f64>,
    spacing: f64,
    bandwidth: f64,
    support: Interval,
    density_floor: f64,
}

/// Silverman's rule `1.06 σ̂ N^(-1/5)` with σ̂ the sample standard deviation.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    1.06 * sample_std(samples) * n.powf(-0.2)
}

fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0).max(1.0);
    var.sqrt()
}

pub fn fit_kernel_score(samples: &[f64], bandwidth: Option<f64>) -> Result<KernelScoreModel> {
    if samples.len() < MIN_KERNEL_SAMPLES {
        return Err(Error::TooFewSamples {
            got: samples.len(),
            need: MIN_KERNEL_SAMPLES,
        });
    }
    if samples.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kernel score samples"));
    }
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::ZeroVariance);
    }
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {h}"
            )))
        }
        None => silverman_bandwidth(samples),
    };
    if !(h > 0.0) {
        return Err(Error::ZeroVariance);
    }

    let intervals_f = ((hi - lo) * KNOTS_PER_BANDWIDTH as f64 / h).ceil().max(1.0);
    if intervals_f >= MAX_KNOTS as f64 {
        return Err(Error::InvalidParameter(format!(
            "bandwidth {h} is too small for the sample range {}",
            hi - lo
        )));
    }
    let intervals = intervals_f as usize;
    let spacing = (hi - lo) / intervals as f64;
    let knots: Vec<f64> = (0..=intervals).map(|k| lo + spacing * k as f64).collect();

    let mut weights = vec![0.0; intervals + 1];
    for &v in samples {
        let pos = (v - lo) / spacing;
        let i = (pos.floor() as usize).min(intervals - 1);
        let frac = pos - i as f64;
        weights[i] += 1.0 - frac;
        weights[i + 1] += frac;
    }
    let norm = 1.0 / (samples.len() as f64 * h);
    let coefficients = weights.into_iter().map(|w| w * norm).collect();

    let mut model = KernelScoreModel {
        knots,
        coefficients,
        spacing,
        bandwidth: h,
        support: Interval {
            lo: lo - 2.0 * h,
            hi: hi + 2.0 * h,
        },
        density_floor: 0.0,
    };
    let peak = model
        .knots
        .iter()
        .map(|&g| model.density_and_slope(g).0)
        .fold(0.0, f64::max);
    model.density_floor = DENSITY_FLOOR_RATIO * peak;
    Ok(model)
}

impl KernelScoreModel {
    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn coefficients(&self) -> &[f64] {
        &self.coefficients
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn support(&self) -> Interval {
        self.support
    }

    pub fn density_floor(&self) -> f64 {
        self.density_floor
    }

    /// Unfloored density and its derivative at `u`.
    pub fn density_and_slope(&self, u: f64) -> (f64, f64) {
        let h = self.bandwidth;
        let g0 = self.knots[0];
        let last = self.knots.len() - 1;
        let first_k = ((u - 2.0 * h - g0) / self.spacing).ceil().max(0.0);
        let last_k = ((u + 2.0 * h - g0) / self.spacing).floor();
        if last_k < 0.0 || first_k > last as f64 {
            return (0.0, 0.0);
        }
        let (first_k, last_k) = (first_k as usize, (last_k as usize).min(last));
        let mut f = 0.0;
        let mut df = 0.0;
        for k in first_k..=last_k {
            let t = (u - self.knots[k]) / h;
            let c = self.coefficients[k];
            f += c * cubic_bspline(t);
            df += c * cubic_bspline_derivative(t);
        }
        (f, df / h)
    }

    fn clamp(&self, u: f64) -> f64 {
        u.clamp(self.support.lo, self.support.hi)
    }

    pub fn density(&self, u: f64) -> f64 {
        self.density_and_slope(self.clamp(u))
            .0
            .max(self.density_floor)
    }
}

impl ScoreEvaluator for KernelScoreModel {
    fn score(&self, u: f64) -> f64 {
        let (f, df) = self.density_and_slope(self.clamp(u));
        -df / f.max(self.density_floor)
    }
}

impl LogDensity for KernelScoreModel {
    fn log_density(&self, u: f64) -> f64 {
        self.density(u).ln()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn normal_samples(n: usize, seed: u64) -> Vec<f64> {
        // Box-Muller on the seeded generator.
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = rng.random();
                (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
            })
            .collect()
    }

    #[test]
    fn gaussian_score_examples() {
        assert_eq!(gaussian_score(0.0, 1.0).unwrap().score(0.7), 0.7);
        assert_eq!(gaussian_score(1.0, 2.0).unwrap().score(1.0), 0.0);
        assert_eq!(gaussian_score(0.0, 0.5).unwrap().score(1.0), 4.0);
        assert_eq!(eval_score(&gaussian_score(0.0, 1.0).unwrap(), -2.0), -2.0);
        assert!(gaussian_score(0.0, 0.0).is_err());
        assert!(gaussian_score(0.0, -1.0).is_err());
    }

    #[test]
    fn gaussian_score_matches_fd_of_log_density() {
        let g = gaussian_score(0.3, 0.7).unwrap();
        let h = 1e-5;
        for i in -20..=20 {
            let u = i as f64 * 0.1;
            let fd = -(g.log_density(u + h) - g.log_density(u - h)) / (2.0 * h);
            assert!((fd - g.score(u)).abs() < 1e-8, "u={u}");
        }
    }

    #[test]
    fn laplace_score_matches_fd_away_from_mean() {
        let l = laplace_score(0.1, 0.5).unwrap();
        let h = 1e-6;
        for u in [-1.0, -0.3, 0.5, 2.0] {
            let fd = -(l.log_density(u + h) - l.log_density(u - h)) / (2.0 * h);
            assert!((fd - l.score(u)).abs() < 1e-6);
        }
        assert!(laplace_score(0.0, 0.0).is_err());
    }

    #[test]
    fn bspline_integrates_to_one_and_derivative_matches() {
        let n = 40_000;
        let step = 4.0 / n as f64;
        let area: f64 = (0..n)
            .map(|i| cubic_bspline(-2.0 + (i as f64 + 0.5) * step) * step)
            .sum();
        assert!((area - 1.0).abs() < 1e-9);
        for i in -39..=39 {
            let t = i as f64 * 0.05 + 0.013;
            let fd = (cubic_bspline(t + 1e-6) - cubic_bspline(t - 1e-6)) / 2e-6;
            assert!((fd - cubic_bspline_derivative(t)).abs() < 1e-8, "t={t}");
        }
    }

    fn mean_abs_error_vs_normal(model: &KernelScoreModel) -> f64 {
        let grid: Vec<f64> = (0..=30).map(|i| -1.5 + 0.1 * i as f64).collect();
        grid.iter()
            .map(|&u| (model.score(u) - u).abs())
            .sum::<f64>()
            / grid.len() as f64
    }

    #[test]
    fn kernel_score_tracks_normal_score() {
        // Bandwidth scaled for derivative estimation (N^(-1/7) reference rule).
        let samples = normal_samples(10_000, 11);
        let model = fit_kernel_score(&samples, Some(0.45)).unwrap();
        let mae = mean_abs_error_vs_normal(&model);
        assert!(mae <= 0.1, "mean abs error {mae}");
    }

    #[test]
    fn kernel_score_error_shrinks_with_sample_size() {
        let small = fit_kernel_score(&normal_samples(1_000, 5), None).unwrap();
        let large = fit_kernel_score(&normal_samples(100_000, 5), None).unwrap();
        let (e_small, e_large) = (
            mean_abs_error_vs_normal(&small),
            mean_abs_error_vs_normal(&large),
        );
        assert!(e_large < e_small, "{e_large} vs {e_small}");
    }

    #[test]
    fn kernel_density_integrates_to_one() {
        let samples = normal_samples(500, 3);
        let model = fit_kernel_score(&samples, None).unwrap();
        let sup = model.support();
        let n = 20_000;
        let step = sup.width() / n as f64;
        let area: f64 = (0..n)
            .map(|i| model.density_and_slope(sup.lo + (i as f64 + 0.5) * step).0 * step)
            .sum();
        assert!((area - 1.0).abs() < 1e-6, "area={area}");
    }

    #[test]
    fn kernel_slope_matches_fd_of_density() {
        let samples = normal_samples(300, 5);
        let model = fit_kernel_score(&samples, None).unwrap();
        for i in 0..50 {
            let u = -2.0 + 0.08 * i as f64 + 0.0031;
            let (_, df) = model.density_and_slope(u);
            let fd =
                (model.density_and_slope(u + 1e-6).0 - model.density_and_slope(u - 1e-6).0) / 2e-6;
            assert!((df - fd).abs() < 1e-6, "u={u}");
        }
    }

    #[test]
    fn kernel_rejects_constant_and_short_samples() {
        assert_eq!(
            fit_kernel_score(&[0.25; 20], None),
            Err(Error::ZeroVariance)
        );
        assert!(matches!(
            fit_kernel_score(&[0.1, 0.2, 0.3], None),
            Err(Error::TooFewSamples { got: 3, need: 10 })
        ));
        let s = normal_samples(20, 1);
        assert!(fit_kernel_score(&s, Some(0.0)).is_err());
    }

    #[test]
    fn kernel_score_is_continuous_across_knots() {
        let samples = normal_samples(200, 9);
        let model = fit_kernel_score(&samples, None).unwrap();
        let mid = model.knots()[model.knots().len() / 2];
        let v = model.score(mid);
        assert!(v.is_finite());
        // Shrink a symmetric bracket around each probed knot; the one-sided values must meet.
        for &g in model.knots().iter().step_by(7) {
            let mut eps = 1e-3;
            let mut gap = f64::INFINITY;
            while eps > 1e-12 {
                gap = (model.score(g - eps) - model.score(g + eps)).abs();
                eps *= 0.5;
            }
            assert!(gap <= 1e-9, "knot {g}: gap {gap}");
        }
        // Knot positions at ±h and ±2h from each grid point are spline breakpoints too.
        let h = model.bandwidth();
        for k in [-2.0, -1.0, 1.0, 2.0] {
            let b = mid + k * h;
            let left = model.score(b - 1e-13);
            let right = model.score(b + 1e-13);
            assert!((left - right).abs() <= 1e-9);
        }
    }

    #[test]
    fn kernel_clamps_outside_support() {
        let samples = normal_samples(100, 2);
        let model = fit_kernel_score(&samples, None).unwrap();
        let sup = model.support();
        assert_eq!(model.score(sup.lo - 10.0), model.score(sup.lo));
        assert_eq!(model.score(sup.hi + 1e9), model.score(sup.hi));
        assert_eq!(model.log_density(sup.lo - 5.0), model.log_density(sup.lo));
    }

    #[test]
    fn kernel_score_bounded_everywhere() {
        let samples = normal_samples(100, 4);
        let model = fit_kernel_score(&samples, None).unwrap();
        let sup = model.support();
        let bound = 10.0 / (model.bandwidth() * DENSITY_FLOOR_RATIO);
        for i in 0..=10_000 {
            let u = sup.lo - 1.0 + (sup.width() + 2.0) * i as f64 / 10_000.0;
            let v = model.score(u);
            assert!(v.is_finite() && v.abs() < bound);
            assert!(model.log_density(u).is_finite());
        }
    }

    #[test]
    fn kernel_score_antisymmetric_on_symmetrized_sample() {
        let half = normal_samples(1000, 21);
        let samples: Vec<f64> = half
            .iter()
            .copied()
            .chain(half.iter().map(|v| -v))
            .collect();
        let model = fit_kernel_score(&samples, None).unwrap();
        for i in 0..=20 {
            let u = 0.1 * i as f64;
            let asym = model.score(u) + model.score(-u);
            assert!(asym.abs() <= 0.05, "u={u}, asym={asym}");
        }
    }
}
